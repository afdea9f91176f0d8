//! Epoch loop, modification schedule and run reports.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Mode};
use crate::config::{Arch, DatasetSource, TrainConfig};
use crate::data::{exponential_imbalance_counts, subsample_to_profile, synth_gaussian_mixture, DataSplits, LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::idx::ingest_idx;
use crate::ledger::{batch_weight, score_rows, GradLedger, ScoreRow};
use crate::model::{NetworkState, NeuronRef};
use crate::optim::{make_optimizer, Optimizer};
use crate::plasticity::{apply_modification, plan_modification, EventRecord};
use crate::report::{
    accuracy, argmax_rows, group_accuracy, mean_present, per_class_from_predictions, EpochMetrics,
    GroupThresholds, RunReport, REPORT_VERSION,
};
use crate::tensor::Tensor;

const EVAL_CHUNK: usize = 1024;

/// Independent random streams derived from the run seed.
fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

const INIT_STREAM: u64 = 1;
const ORDER_STREAM: u64 = 2;
const PLASTICITY_STREAM: u64 = 3;

/// Loads or synthesizes the train/test splits described by `cfg`.
pub fn prepare_data(cfg: &TrainConfig) -> Result<DataSplits> {
    let mut splits = match &cfg.dataset {
        DatasetSource::Synth => {
            let counts = exponential_imbalance_counts(cfg.n_max, cfg.num_classes, cfg.p)?;
            synth_gaussian_mixture(cfg.num_classes, cfg.dim, cfg.separation, &counts, cfg.test_per_class, cfg.data_seed)?
        }
        DatasetSource::Idx(dir) => {
            let dir = Path::new(dir);
            let train = ingest_idx(
                &dir.join("train-images-idx3-ubyte"),
                &dir.join("train-labels-idx1-ubyte"),
                Split::Train,
            )?;
            let mut test = ingest_idx(
                &dir.join("t10k-images-idx3-ubyte"),
                &dir.join("t10k-labels-idx1-ubyte"),
                Split::Test,
            )?;
            test.num_classes = train.num_classes;
            let smallest = train.histogram().into_iter().min().unwrap_or(0);
            let counts = exponential_imbalance_counts(cfg.n_max.min(smallest), train.num_classes, cfg.p)?;
            let train = subsample_to_profile(&train, &counts, cfg.data_seed)?;
            DataSplits { train, test }
        }
    };
    if cfg.arch == Arch::Mlp {
        for ds in [&mut splits.train, &mut splits.test] {
            let n = ds.len();
            let flat = ds.features.numel() / n.max(1);
            ds.features = std::mem::replace(&mut ds.features, Tensor::zeros(&[0])).reshape(&[n, flat])?;
        }
    }
    Ok(splits)
}

pub fn build_network<R: Rng + ?Sized>(
    cfg: &TrainConfig,
    sample_shape: &[usize],
    num_classes: usize,
    rng: &mut R,
) -> Result<NetworkState> {
    match cfg.arch {
        Arch::Mlp => {
            let dim = sample_shape.iter().product();
            NetworkState::build_mlp(dim, &cfg.hidden, num_classes, rng)
        }
        Arch::Cnn => match *sample_shape {
            [c, h, w] => NetworkState::build_small_cnn([c, h, w], &cfg.channels, num_classes, cfg.residual, rng),
            _ => Err(Error::config(
                "arch",
                format!("cnn needs [C, H, W] samples, data has {sample_shape:?}"),
            )),
        },
    }
}

pub struct RunState {
    pub epoch: usize,
    pub net: NetworkState,
    pub optimizer: Optimizer,
    pub ledger: GradLedger,
    order_rng: ChaCha8Rng,
    plasticity_rng: ChaCha8Rng,
}

impl RunState {
    pub fn new(cfg: &TrainConfig, train: &LabeledDataset) -> Result<Self> {
        let mut init_rng = stream(cfg.seed, INIT_STREAM);
        let net = build_network(cfg, train.sample_shape(), train.num_classes, &mut init_rng)?;
        let optimizer = make_optimizer(cfg.optim, &net);
        Ok(RunState {
            epoch: 0,
            net,
            optimizer,
            ledger: GradLedger::new(cfg.ledger_mode, cfg.ema_decay, cfg.magnitude),
            order_rng: stream(cfg.seed, ORDER_STREAM),
            plasticity_rng: stream(cfg.seed, PLASTICITY_STREAM),
        })
    }

    /// Scores the neurons from the ledger, applies the resulting event to the
    /// network and optimizer state, and clears the ledger.
    pub fn modify(&mut self, cfg: &TrainConfig) -> Result<(BTreeMap<NeuronRef, f64>, EventRecord)> {
        let seed = self.plasticity_rng.random::<u64>();
        let scores = self.ledger.finalize_scores(&self.net, cfg.criterion, seed)?;
        let plan = plan_modification(&scores, &self.net, cfg.plasticity.alpha, self.epoch, cfg.criterion)?;
        let record = apply_modification(
            &mut self.net,
            &plan,
            &cfg.plasticity,
            Some(&mut self.optimizer),
            &mut self.plasticity_rng,
        )?;
        self.ledger.reset();
        Ok((scores, record))
    }

    /// One pass over shuffled mini-batches. With `accumulate`, each batch's
    /// per-neuron gradient magnitudes are added to the ledger before the
    /// optimizer step. Returns mean loss and train accuracy.
    pub fn train_epoch(&mut self, train: &LabeledDataset, cfg: &TrainConfig, accumulate: bool) -> Result<(f64, f64)> {
        let weights = train
            .profile
            .as_ref()
            .map(|p| p.weights.clone())
            .ok_or_else(|| Error::input("training split has no class profile"))?;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.order_rng);
        let (mut loss_sum, mut hits) = (0.0, 0usize);
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let (x, y) = train.batch(idx);
            let mut g = Graph::new();
            let fwd = self.net.forward(&mut g, &x, Mode::Train)?;
            let sample_w: Option<Vec<f64>> = cfg
                .class_weighted_loss
                .then(|| y.iter().map(|&l| weights[l]).collect());
            let loss = g.softmax_cross_entropy(fwd.logits, &y, sample_w.as_deref())?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch: self.epoch,
                    batch: b,
                });
            }
            loss_sum += value * y.len() as f64;
            hits += argmax_rows(g.value(fwd.logits))
                .iter()
                .zip(&y)
                .filter(|(p, l)| p == l)
                .count();
            g.backward(loss)?;
            self.net.store_grads(&g, &fwd);
            if accumulate {
                let w_b = batch_weight(&y, &weights, cfg.plasticity.gr);
                self.ledger.accumulate(&self.net, w_b)?;
            }
            self.optimizer.step(&mut self.net)?;
        }
        self.net.clear_grads();
        let n = train.len().max(1) as f64;
        Ok((loss_sum / n, hits as f64 / n))
    }
}

/// Mean loss and predictions over a dataset in evaluation mode.
pub fn evaluate(net: &mut NetworkState, ds: &LabeledDataset) -> Result<(f64, Vec<usize>)> {
    let mut preds = Vec::with_capacity(ds.len());
    let mut loss_sum = 0.0;
    let all: Vec<usize> = (0..ds.len()).collect();
    for idx in all.chunks(EVAL_CHUNK) {
        let (x, y) = ds.batch(idx);
        let mut g = Graph::new();
        let fwd = net.forward(&mut g, &x, Mode::Eval)?;
        let loss = g.softmax_cross_entropy(fwd.logits, &y, None)?;
        loss_sum += g.value(loss).item() * y.len() as f64;
        preds.extend(argmax_rows(g.value(fwd.logits)));
    }
    Ok((loss_sum / ds.len().max(1) as f64, preds))
}

/// Whether epoch `e` is an accumulation window closing with an event.
pub fn is_event_epoch(cfg: &TrainConfig, e: usize) -> bool {
    cfg.plasticity.nam && e % cfg.plasticity.e_mod == cfg.plasticity.e_mod - 1
}

/// Everything a run produces.
pub struct RunOutcome {
    pub report: RunReport,
    pub network: NetworkState,
    /// Per-event neuron scores, filled when `dump_scores` is set.
    pub scores: Vec<ScoreRow>,
}

pub fn run(cfg: &TrainConfig, data: &DataSplits) -> Result<RunReport> {
    run_full(cfg, data).map(|o| o.report)
}

/// Trains for `cfg.epochs`, evaluating on the test split after every epoch
/// and modifying the network at the end of each accumulation window. The
/// epoch's metrics are taken before its event.
pub fn run_full(cfg: &TrainConfig, data: &DataSplits) -> Result<RunOutcome> {
    cfg.validate()?;
    let (train, test) = (&data.train, &data.test);
    let train_counts = train.histogram();
    let mut state = RunState::new(cfg, train)?;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut events: Vec<EventRecord> = Vec::new();
    let mut scores = Vec::new();
    let mut last_preds = Vec::new();
    for e in 0..cfg.epochs {
        state.epoch = e;
        let window = is_event_epoch(cfg, e);
        let (train_loss, train_accuracy) = state.train_epoch(train, cfg, window)?;
        let (test_loss, preds) = evaluate(&mut state.net, test)?;
        let per_class = per_class_from_predictions(&preds, &test.labels, test.num_classes);
        epochs.push(EpochMetrics {
            epoch: e,
            train_loss,
            train_accuracy,
            test_loss,
            test_accuracy: accuracy(&preds, &test.labels),
            mean_class_accuracy: mean_present(&per_class).unwrap_or(0.0),
        });
        last_preds = preds;
        if window {
            let (s, record) = state.modify(cfg)?;
            if cfg.dump_scores {
                scores.extend(score_rows(events.len(), cfg.criterion, &s));
            }
            events.push(record);
        }
    }
    let final_per_class = per_class_from_predictions(&last_preds, &test.labels, test.num_classes);
    let thresholds = GroupThresholds {
        many: cfg.many_threshold,
        few: cfg.few_threshold,
    };
    let last = epochs.last().expect("at least one epoch");
    let report = RunReport {
        version: REPORT_VERSION,
        config_hash: cfg.hash(),
        seed: cfg.seed,
        config: cfg.pairs().into_iter().collect(),
        final_overall: last.test_accuracy,
        final_mean_class: last.mean_class_accuracy,
        groups: group_accuracy(&final_per_class, &train_counts, thresholds),
        final_per_class,
        train_counts,
        final_widths: state.net.mutable_layers().iter().map(|&l| state.net.width(l)).collect(),
        epochs,
        events,
    };
    Ok(RunOutcome {
        report,
        network: state.net,
        scores,
    })
}
