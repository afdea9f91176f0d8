//! Per-neuron importance scores gathered over an accumulation window.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Layer, NetworkState, NeuronRef};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    AccumulatedGradient,
    FinalBatchGradient,
    L1Norm,
    Random,
}

impl Criterion {
    pub const ALL: [Criterion; 4] = [
        Criterion::AccumulatedGradient,
        Criterion::FinalBatchGradient,
        Criterion::L1Norm,
        Criterion::Random,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Criterion::AccumulatedGradient => "accumulated_gradient",
            Criterion::FinalBatchGradient => "final_batch_gradient",
            Criterion::L1Norm => "l1_norm",
            Criterion::Random => "random",
        }
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Criterion {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Criterion::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown criterion `{s}`"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LedgerMode {
    Mean,
    Ema,
}

/// Reduction over a neuron's gradient block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Magnitude {
    L2,
    L1,
}

/// Flat index ranges owned by one neuron inside each of its parameter tensors.
fn owned_grads<'a>(net: &'a NetworkState, n: NeuronRef) -> Result<Vec<&'a [f64]>> {
    let layer = &net.layers()[n.layer];
    let params = layer.params();
    if params.is_empty() {
        return Err(Error::state(format!("layer {} has no parameters", n.layer)));
    }
    let (w, b) = (params[0], params[1]);
    let rl: usize = w.shape()[1..].iter().product();
    let missing = || Error::state(format!("no gradients stored for layer {}", n.layer));
    let wg = w.grad.as_deref().ok_or_else(missing)?;
    let bg = b.grad.as_deref().ok_or_else(missing)?;
    let mut out = vec![&wg[n.slot * rl..(n.slot + 1) * rl], &bg[n.slot..=n.slot]];
    if let Some(Layer::Norm(norm)) = net.norm_of(n.layer).map(|i| &net.layers()[i]) {
        let gg = norm.gamma.grad.as_deref().ok_or_else(missing)?;
        let btg = norm.beta.grad.as_deref().ok_or_else(missing)?;
        out.push(&gg[n.slot..=n.slot]);
        out.push(&btg[n.slot..=n.slot]);
    }
    Ok(out)
}

pub fn reduce(blocks: &[&[f64]], magnitude: Magnitude) -> f64 {
    let values = blocks.iter().flat_map(|b| b.iter());
    match magnitude {
        Magnitude::L2 => values.map(|v| v * v).sum::<f64>().sqrt(),
        Magnitude::L1 => values.map(|v| v.abs()).sum(),
    }
}

/// Norm of the gradient over every parameter owned by `n`: its incoming row
/// or kernel slice, its bias and the following norm layer's affine pair.
pub fn neuron_grad_magnitude(net: &NetworkState, n: NeuronRef, magnitude: Magnitude) -> Result<f64> {
    Ok(reduce(&owned_grads(net, n)?, magnitude))
}

/// Sum of `w_c` over the batch labels, or 1 when reweighting is off.
pub fn batch_weight(labels: &[usize], class_weights: &[f64], gr_enabled: bool) -> f64 {
    if gr_enabled {
        labels.iter().map(|&l| class_weights[l]).sum()
    } else {
        1.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradLedger {
    pub mode: LedgerMode,
    pub decay: f64,
    pub magnitude: Magnitude,
    batches: u64,
    /// Running weighted sum (mean mode) or moving average (ema mode), by id.
    acc: BTreeMap<u64, f64>,
    last: BTreeMap<u64, f64>,
}

impl GradLedger {
    pub fn new(mode: LedgerMode, decay: f64, magnitude: Magnitude) -> Self {
        GradLedger {
            mode,
            decay,
            magnitude,
            batches: 0,
            acc: BTreeMap::new(),
            last: BTreeMap::new(),
        }
    }

    pub fn batches(&self) -> u64 {
        self.batches
    }

    pub fn reset(&mut self) {
        self.batches = 0;
        self.acc.clear();
        self.last.clear();
    }

    /// Records one batch of per-neuron magnitudes with batch weight `w_b`.
    pub fn record(&mut self, magnitudes: &[(u64, f64)], w_b: f64) -> Result<()> {
        if !(w_b > 0.0) || !w_b.is_finite() {
            return Err(Error::input(format!("batch weight must be positive, got {w_b}")));
        }
        for &(id, m) in magnitudes {
            let a = self.acc.entry(id).or_insert(0.0);
            match self.mode {
                LedgerMode::Mean => *a += w_b * m,
                LedgerMode::Ema => *a = self.decay * *a + (1.0 - self.decay) * w_b * m,
            }
            self.last.insert(id, m);
        }
        self.batches += 1;
        Ok(())
    }

    /// Reads the gradients currently stored on `net` and records them.
    pub fn accumulate(&mut self, net: &NetworkState, w_b: f64) -> Result<()> {
        let mags = net
            .enumerate_neurons()
            .into_iter()
            .map(|n| Ok((n.id, neuron_grad_magnitude(net, n, self.magnitude)?)))
            .collect::<Result<Vec<_>>>()?;
        self.record(&mags, w_b)
    }

    fn gradient_score(&self, n: NeuronRef, criterion: Criterion) -> Result<f64> {
        let source = match criterion {
            Criterion::AccumulatedGradient => &self.acc,
            _ => &self.last,
        };
        let v = *source
            .get(&n.id)
            .ok_or_else(|| Error::state(format!("neuron {} has no recorded gradient", n.id)))?;
        Ok(match (criterion, self.mode) {
            (Criterion::AccumulatedGradient, LedgerMode::Mean) => v / self.batches as f64,
            _ => v,
        })
    }

    /// Importance score for every live neuron of the mutable layers.
    pub fn finalize_scores(
        &self,
        net: &NetworkState,
        criterion: Criterion,
        seed: u64,
    ) -> Result<BTreeMap<NeuronRef, f64>> {
        let neurons = net.enumerate_neurons();
        match criterion {
            Criterion::AccumulatedGradient | Criterion::FinalBatchGradient => {
                if self.batches == 0 {
                    return Err(Error::state("no batches accumulated since the last reset"));
                }
                neurons
                    .into_iter()
                    .map(|n| Ok((n, self.gradient_score(n, criterion)?)))
                    .collect()
            }
            Criterion::L1Norm => Ok(neurons
                .into_iter()
                .map(|n| {
                    let w = net.layers()[n.layer].params()[0];
                    let rl: usize = w.shape()[1..].iter().product();
                    let row = &w.data()[n.slot * rl..(n.slot + 1) * rl];
                    (n, row.iter().map(|v| v.abs()).sum())
                })
                .collect()),
            Criterion::Random => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                Ok(neurons.into_iter().map(|n| (n, rng.random::<f64>())).collect())
            }
        }
    }
}

/// One row of the per-event score dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub event: usize,
    pub layer: usize,
    pub slot: usize,
    pub stable_id: u64,
    pub criterion: Criterion,
    pub score: f64,
}

pub fn score_rows(event: usize, criterion: Criterion, scores: &BTreeMap<NeuronRef, f64>) -> Vec<ScoreRow> {
    scores
        .iter()
        .map(|(n, &score)| ScoreRow {
            event,
            layer: n.layer,
            slot: n.slot,
            stable_id: n.id,
            criterion,
            score,
        })
        .collect()
}

pub fn write_scores_csv(path: &Path, rows: &[ScoreRow]) -> Result<()> {
    let io = |e: std::io::Error| Error::io(path, e);
    let mut w = csv::Writer::from_path(path).map_err(|e| io(e.into()))?;
    for r in rows {
        w.serialize(r).map_err(|e| io(e.into()))?;
    }
    w.flush().map_err(io)
}
