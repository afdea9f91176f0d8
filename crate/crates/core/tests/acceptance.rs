//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use plasticnet::config::TrainConfig;
use plasticnet::data::class_weights;
use plasticnet::gradcheck::{run_suite, TOLERANCE};
use plasticnet::ledger::{batch_weight, Criterion, GradLedger, LedgerMode, Magnitude};
use plasticnet::model::NeuronParams;
use plasticnet::plasticity::{apply_modification, plan_modification, weight_scale_factor, PlasticityConfig};
use plasticnet::report::{emit_classwise_csv, emit_report, RunReport};
use plasticnet::suite::{ablation_cell, flag_label, run_grid, Cell, CellResult, ABLATION_ROWS};
use plasticnet::trainer::{is_event_epoch, prepare_data, RunState};
use plasticnet::{Mode, NetworkState, NeuronRef, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn verdict(pass: bool, detail: String) -> Outcome {
    if pass {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn out_dir() -> PathBuf {
    let base = option_env!("CARGO_TARGET_TMPDIR").map_or_else(std::env::temp_dir, PathBuf::from);
    base.join("acceptance")
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let checks = run_suite(0, None).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let worst = checks.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)).unwrap();
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed()).map(|c| c.op.as_str()).collect();
    verdict(
        failed.is_empty() && secs < 60.0,
        format!(
            "{} checks, worst {} at {:.2e} (limit {TOLERANCE:e}), failed {failed:?}, {secs:.2}s",
            checks.len(),
            worst.op,
            worst.max_rel_error
        ),
    )
}

fn structural_invariants() -> Outcome {
    let mut cfg = TrainConfig::default();
    cfg.epochs = 50;
    cfg.plasticity.e_mod = 10;
    cfg.plasticity.alpha = 0.3;
    let data = prepare_data(&cfg).map_err(|e| e.to_string())?;
    let mut state = RunState::new(&cfg, &data.train).map_err(|e| e.to_string())?;
    let mut violations = Vec::new();
    let mut events = 0;
    for e in 0..cfg.epochs {
        state.epoch = e;
        let window = is_event_epoch(&cfg, e);
        state.train_epoch(&data.train, &cfg, window).map_err(|e| e.to_string())?;
        if !window {
            continue;
        }
        let widths: Vec<usize> = state.net.mutable_layers().iter().map(|&l| state.net.width(l)).collect();
        let live_before = state.net.live_ids();
        let (_, record) = state.modify(&cfg).map_err(|e| e.to_string())?;
        events += 1;
        let now: Vec<usize> = state.net.mutable_layers().iter().map(|&l| state.net.width(l)).collect();
        if now != widths {
            violations.push(format!("epoch {e}: widths {widths:?} -> {now:?}"));
        }
        if let Err(err) = state.net.validate() {
            violations.push(format!("epoch {e}: validator: {err}"));
        }
        let live = state.net.live_ids();
        if state.optimizer.neuron_keys() != live || !state.optimizer.matches(&state.net) {
            violations.push(format!("epoch {e}: optimizer keys differ from live ids"));
        }
        for ev in &record.layers {
            let pruned: BTreeSet<u64> = ev.pruned_ids.iter().copied().collect();
            let added: BTreeSet<u64> = ev.added_ids.iter().copied().collect();
            if !pruned.is_disjoint(&added) {
                violations.push(format!("epoch {e}: layer {} pruned an added neuron", ev.layer));
            }
            if !pruned.is_subset(&live_before) || !pruned.is_disjoint(&live) || !added.is_subset(&live) {
                violations.push(format!("epoch {e}: layer {} id bookkeeping", ev.layer));
            }
            if pruned.is_empty() {
                violations.push(format!("epoch {e}: layer {} had an empty event", ev.layer));
            }
        }
    }
    verdict(
        events == 5 && violations.is_empty(),
        format!("{events} events, {} violations {violations:?}", violations.len()),
    )
}

fn formula_conformance() -> Outcome {
    let mut r = rng(3);
    let mut worst_weight = 0.0f64;
    let mut worst_batch = 0.0f64;
    let mut worst_scale = 0.0f64;
    let mut count_mismatches = 0;
    for _ in 0..1000 {
        let k = r.random_range(1..=20);
        let counts: Vec<usize> = (0..k).map(|_| r.random_range(1..=5000)).collect();
        let n_max = *counts.iter().max().unwrap();
        let w = class_weights(&counts).map_err(|e| e.to_string())?;
        for (c, &n) in counts.iter().enumerate() {
            worst_weight = worst_weight.max((w[c] - n_max as f64 / n as f64).abs());
        }
    }
    for _ in 0..1000 {
        let k = r.random_range(1..=20);
        let w: Vec<f64> = (0..k).map(|_| r.random_range(1.0..100.0)).collect();
        let labels: Vec<usize> = (0..r.random_range(1..=128)).map(|_| r.random_range(0..k)).collect();
        // Grouped form: Σ_c (count of c in the batch) · w_c.
        let mut per_class = vec![0usize; k];
        labels.iter().for_each(|&l| per_class[l] += 1);
        let oracle: f64 = per_class.iter().zip(&w).map(|(&n, &wc)| n as f64 * wc).sum();
        let got = batch_weight(&labels, &w, true);
        worst_batch = worst_batch.max((got - oracle).abs() / oracle);
        if batch_weight(&labels, &w, false) != 1.0 {
            return Err("batch weight without reweighting is not 1".into());
        }
    }
    for _ in 0..1000 {
        let (a, b) = (r.random_range(1..=4096usize), r.random_range(1..=4096usize));
        let s = weight_scale_factor(a, b).map_err(|e| e.to_string())?;
        worst_scale = worst_scale.max((s - (a as f64 / b as f64).sqrt()).abs());
    }
    for _ in 0..1000 {
        let n = r.random_range(1..=300usize);
        let m = r.random_range(0..=1000usize);
        let alpha = m as f64 / 1000.0;
        let expected = m * n / 1000;
        let net = NetworkState::build_mlp(2, &[n], 2, &mut rng(0)).map_err(|e| e.to_string())?;
        let scores: BTreeMap<NeuronRef, f64> = net.enumerate_neurons().into_iter().map(|x| (x, r.random())).collect();
        let plan = plan_modification(&scores, &net, alpha, 0, Criterion::AccumulatedGradient).map_err(|e| e.to_string())?;
        let lp = &plan.layers[0];
        if lp.add_count != expected || lp.prune_slots.len() != expected {
            count_mismatches += 1;
        }
    }
    verdict(
        worst_weight <= 1e-12 && worst_batch <= 1e-12 && worst_scale <= 1e-12 && count_mismatches == 0,
        format!(
            "class weight err {worst_weight:.1e}, batch weight rel err {worst_batch:.1e}, \
             scale err {worst_scale:.1e}, count mismatches {count_mismatches}/1000"
        ),
    )
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn null_surgery() -> Outcome {
    let nets = [
        ("mlp", NetworkState::build_mlp(8, &[16, 12], 5, &mut rng(1)), vec![6, 8]),
        ("cnn", NetworkState::build_small_cnn([1, 8, 8], &[4, 6], 3, false, &mut rng(2)), vec![5, 1, 8, 8]),
        ("residual", NetworkState::build_small_cnn([2, 8, 8], &[4, 4], 3, true, &mut rng(3)), vec![4, 2, 8, 8]),
    ];
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    for (name, net, shape) in nets {
        let base = net.map_err(|e| e.to_string())?;
        let mut r = rng(4);
        let n: usize = shape.iter().product();
        let x = Tensor::new(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
        for mode in [Mode::Eval, Mode::Train] {
            // Prune: silence two neurons per layer, then remove them.
            let mut net = base.clone();
            for layer in net.mutable_layers() {
                for slot in [0, 2] {
                    let zeros = vec![0.0; net.outgoing(layer, slot).unwrap().len()];
                    net.set_outgoing(layer, slot, &zeros).unwrap();
                    let mut p = net.neuron_params(layer, slot).unwrap();
                    p.incoming.iter_mut().for_each(|w| *w = 0.0);
                    p.bias = 0.0;
                    net.set_neuron_params(layer, slot, &p).unwrap();
                }
            }
            let before = net.clone().logits(&x, mode).unwrap();
            for layer in net.mutable_layers() {
                net.remove_neurons(layer, &[0, 2]).map_err(|e| e.to_string())?;
            }
            let pruned = max_abs_diff(&before, &net.clone().logits(&x, mode).unwrap());

            // Grow: fresh neurons with random incoming weights and no fan-out.
            let mut net = base.clone();
            let before = net.clone().logits(&x, mode).unwrap();
            for layer in net.mutable_layers() {
                let fan_in = net.neuron_params(layer, 0).unwrap().incoming.len();
                let fresh: Vec<NeuronParams> = (0..3)
                    .map(|_| NeuronParams {
                        incoming: (0..fan_in).map(|_| r.random_range(-1.0..1.0)).collect(),
                        bias: r.random_range(-0.5..0.5),
                        gamma: 1.0 + r.random_range(-0.1..0.1),
                        beta: r.random_range(-0.1..0.1),
                    })
                    .collect();
                net.append_neurons(layer, &fresh).map_err(|e| e.to_string())?;
            }
            let grown = max_abs_diff(&before, &net.clone().logits(&x, mode).unwrap());

            // Paired event without weight scaling: the k lowest-scored neurons
            // per layer have no fan-out, so dropping them and growing k fresh
            // ones leaves the function unchanged.
            const ALPHA: f64 = 0.25;
            let mut net = base.clone();
            let mut scores = BTreeMap::new();
            for n in net.enumerate_neurons() {
                let k = (ALPHA * net.width(n.layer) as f64 + 1e-9).floor() as usize;
                scores.insert(n, if n.slot < k { 0.0 } else { 1.0 });
                if n.slot < k {
                    let zeros = vec![0.0; net.outgoing(n.layer, n.slot).unwrap().len()];
                    net.set_outgoing(n.layer, n.slot, &zeros).unwrap();
                }
            }
            let before = net.clone().logits(&x, mode).unwrap();
            let cfg = PlasticityConfig {
                ws: false,
                ..PlasticityConfig::default()
            };
            let plan = plan_modification(&scores, &net, ALPHA, 0, Criterion::AccumulatedGradient)
                .map_err(|e| e.to_string())?;
            if plan.layers.iter().all(|l| l.prune_slots.is_empty()) {
                return Err("paired null event planned no changes".into());
            }
            for l in &plan.layers {
                let k = (ALPHA * net.width(l.layer) as f64 + 1e-9).floor() as usize;
                if l.prune_slots.iter().any(|&s| s >= k) {
                    return Err("paired null event selected a live neuron".into());
                }
            }
            apply_modification(&mut net, &plan, &cfg, None, &mut r).map_err(|e| e.to_string())?;
            let paired = max_abs_diff(&before, &net.clone().logits(&x, mode).unwrap());

            let m = pruned.max(grown).max(paired);
            worst = worst.max(m);
            parts.push(format!("{name}/{mode:?} {m:.1e}"));
        }
    }
    verdict(worst < 1e-10, format!("max logit change {worst:.2e} ({})", parts.join(", ")))
}

fn argsort_per_layer(scores: &BTreeMap<NeuronRef, f64>) -> Vec<Vec<usize>> {
    let mut layers: BTreeMap<usize, Vec<(f64, usize)>> = BTreeMap::new();
    for (n, &s) in scores {
        layers.entry(n.layer).or_default().push((s, n.slot));
    }
    layers
        .into_values()
        .map(|mut v| {
            v.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            v.into_iter().map(|(_, s)| s).collect()
        })
        .collect()
}

fn ranking_invariance() -> Outcome {
    let mut r = rng(5);
    let mut mismatches = 0;
    for case in 0..100 {
        let widths = [r.random_range(3..40), r.random_range(3..40)];
        let net = NetworkState::build_mlp(3, &widths, 2, &mut rng(case)).map_err(|e| e.to_string())?;
        let ids: Vec<u64> = net.enumerate_neurons().iter().map(|n| n.id).collect();
        let batches = r.random_range(1..=8);
        let lambda = 10f64.powf(r.random_range(-3.0..3.0));
        let (mut plain, mut scaled) = (
            GradLedger::new(LedgerMode::Mean, 0.9, Magnitude::L2),
            GradLedger::new(LedgerMode::Mean, 0.9, Magnitude::L2),
        );
        for _ in 0..batches {
            // Occasional exact ties exercise the slot tie-break.
            let mags: Vec<(u64, f64)> = ids
                .iter()
                .map(|&id| (id, if r.random_bool(0.1) { 0.5 } else { r.random::<f64>() }))
                .collect();
            let w = r.random_range(1.0..500.0);
            plain.record(&mags, w).map_err(|e| e.to_string())?;
            scaled.record(&mags, lambda * w).map_err(|e| e.to_string())?;
        }
        let a = plain.finalize_scores(&net, Criterion::AccumulatedGradient, 0).map_err(|e| e.to_string())?;
        let b = scaled.finalize_scores(&net, Criterion::AccumulatedGradient, 0).map_err(|e| e.to_string())?;
        let pa = plan_modification(&a, &net, 0.3, 0, Criterion::AccumulatedGradient).map_err(|e| e.to_string())?;
        let pb = plan_modification(&b, &net, 0.3, 0, Criterion::AccumulatedGradient).map_err(|e| e.to_string())?;
        if argsort_per_layer(&a) != argsort_per_layer(&b) || pa != pb {
            mismatches += 1;
        }
    }
    verdict(mismatches == 0, format!("{mismatches}/100 ledgers changed ranking"))
}

fn determinism() -> Outcome {
    let mut cfg = TrainConfig::default();
    cfg.epochs = 20;
    cfg.seed = 17;
    let data = prepare_data(&cfg).map_err(|e| e.to_string())?;
    let dir = out_dir().join("determinism");
    std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    let mut bytes = Vec::new();
    for i in 0..2 {
        let report = plasticnet::trainer::run(&cfg, &data).map_err(|e| e.to_string())?;
        let p = dir.join(format!("report_{i}.json"));
        emit_report(&report, &p).map_err(|e| e.to_string())?;
        bytes.push(std::fs::read(&p).map_err(|e| e.to_string())?);
    }
    verdict(
        bytes[0] == bytes[1],
        format!("{} bytes each, identical: {}", bytes[0].len(), bytes[0] == bytes[1]),
    )
}

struct Directional {
    cells: Vec<CellResult>,
    baseline_full_secs: f64,
    total_secs: f64,
}

impl Directional {
    fn reports(&self, name: &str) -> Vec<&RunReport> {
        self.cells.iter().find(|c| c.cell.name == name).map_or_else(Vec::new, |c| c.reports().collect())
    }

    fn failures(&self) -> usize {
        self.cells.iter().map(|c| c.runs.iter().filter(|(_, r)| r.is_err()).count()).sum()
    }

    fn mean(&self, name: &str, f: impl Fn(&RunReport) -> Option<f64>) -> f64 {
        let v: Vec<f64> = self.reports(name).into_iter().filter_map(f).collect();
        v.iter().sum::<f64>() / v.len() as f64
    }
}

const SEEDS: [u64; 10] = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9];
const BASELINE: &str = "none";
const FULL: &str = "nam+gr+ws+gda";
const RANDOM: &str = "nam+gr+ws+gda/random";

fn directional_runs() -> Directional {
    let base = TrainConfig::default();
    let jobs = std::thread::available_parallelism().map_or(1, |n| n.get());
    let quiet = |_: &Cell, _: u64, _: &Result<RunReport, String>| {};
    let start = Instant::now();
    let first = [ablation_cell(ABLATION_ROWS[0]), ablation_cell(ABLATION_ROWS[5])];
    let mut cells = run_grid(&base, &first, &SEEDS, jobs, &quiet);
    let baseline_full_secs = start.elapsed().as_secs_f64();
    let mut rest: Vec<Cell> = ABLATION_ROWS[1..5].iter().map(|&r| ablation_cell(r)).collect();
    let mut random = ablation_cell(ABLATION_ROWS[5]);
    random.name = RANDOM.into();
    random.overrides.push(("criterion".into(), "random".into()));
    rest.push(random);
    cells.extend(run_grid(&base, &rest, &SEEDS, jobs, &quiet));
    Directional {
        cells,
        baseline_full_secs,
        total_secs: start.elapsed().as_secs_f64(),
    }
}

fn few_group(d: &Directional) -> Outcome {
    if d.failures() > 0 {
        return Err(format!("{} runs failed", d.failures()));
    }
    let few = |n: &str| d.mean(n, |r| r.groups.few);
    let overall = |n: &str| d.mean(n, |r| Some(r.final_overall));
    let (fb, ff) = (few(BASELINE), few(FULL));
    let (ob, of) = (overall(BASELINE), overall(FULL));
    verdict(
        ff > fb && of >= ob - 0.005 && d.baseline_full_secs < 600.0,
        format!(
            "few {ff:.4} vs baseline {fb:.4} (gap {:+.4}); overall {of:.4} vs {ob:.4} (gap {:+.4}); {:.0}s",
            ff - fb,
            of - ob,
            d.baseline_full_secs
        ),
    )
}

fn criteria_order(d: &Directional) -> Outcome {
    let acc = d.mean(FULL, |r| Some(r.final_overall));
    let rnd = d.mean(RANDOM, |r| Some(r.final_overall));
    verdict(
        acc - rnd >= 0.0,
        format!("accumulated {acc:.4} vs random {rnd:.4} (gap {:+.4})", acc - rnd),
    )
}

fn ablation(d: &Directional) -> Outcome {
    let rows: Vec<(String, f64)> = ABLATION_ROWS
        .iter()
        .map(|&r| {
            let name = flag_label(r);
            let m = d.mean(&name, |x| Some(x.final_overall));
            (name, m)
        })
        .collect();
    let full = rows.last().unwrap().1;
    let best_other = rows[..5].iter().map(|r| r.1).fold(f64::NEG_INFINITY, f64::max);
    let matrix: Vec<String> = rows.iter().map(|(n, m)| format!("{n} {m:.4}")).collect();
    verdict(
        full >= best_other - 0.003,
        format!("full {full:.4}, best other {best_other:.4}; {}", matrix.join(", ")),
    )
}

fn class_distribution(d: &Directional) -> Outcome {
    let dir = out_dir().join("classwise");
    for name in [BASELINE, FULL] {
        let cell = dir.join(if name == BASELINE { "baseline" } else { "full" });
        std::fs::create_dir_all(&cell).map_err(|e| e.to_string())?;
        for r in d.reports(name) {
            emit_classwise_csv(r, &cell.join(format!("seed{}.csv", r.seed))).map_err(|e| e.to_string())?;
        }
    }
    let tb = d.mean(BASELINE, RunReport::tail_half_mean);
    let tf = d.mean(FULL, RunReport::tail_half_mean);
    verdict(
        tf > tb,
        format!("tail-half {tf:.4} vs baseline {tb:.4} (gap {:+.4}); CSVs in {}", tf - tb, dir.display()),
    )
}

fn print_matrix(d: &Directional) {
    println!("  directional runs: {} cells x {} seeds in {:.0}s", d.cells.len(), SEEDS.len(), d.total_secs);
    println!("  {:<22} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}", "cell", "overall", "mean-cls", "many", "medium", "few", "tail");
    for c in &d.cells {
        let n = &c.cell.name;
        println!(
            "  {:<22} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
            n,
            d.mean(n, |r| Some(r.final_overall)),
            d.mean(n, |r| Some(r.final_mean_class)),
            d.mean(n, |r| r.groups.many),
            d.mean(n, |r| r.groups.medium),
            d.mean(n, |r| r.groups.few),
            d.mean(n, RunReport::tail_half_mean),
        );
    }
}

/// Criteria 1 to 6 check correctness and always gate the exit status. The
/// directional criteria are empirical outcomes: a FAIL line is printed either
/// way, and it gates the exit status only when `ACCEPTANCE_STRICT` is set.
const DIRECTIONAL: std::ops::RangeInclusive<usize> = 7..=10;

fn main() -> ExitCode {
    let strict = std::env::var_os("ACCEPTANCE_STRICT").is_some_and(|v| v != "0");
    let mut failed = Vec::new();
    let mut report = |id: usize, name: &str, outcome: Outcome| {
        let (status, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed.push(id);
                ("FAIL", d)
            }
        };
        println!("criterion {id:>2} {status} {name}: {detail}");
    };
    report(1, "gradient correctness", gradient_correctness());
    report(2, "structural invariants", structural_invariants());
    report(3, "formula conformance", formula_conformance());
    report(4, "null-surgery identity", null_surgery());
    report(5, "ranking invariance", ranking_invariance());
    report(6, "determinism", determinism());
    let d = directional_runs();
    report(7, "few-group gain without overall loss", few_group(&d));
    report(8, "accumulated gradient vs random", criteria_order(&d));
    report(9, "full flag set leads the ablation", ablation(&d));
    report(10, "tail-half class accuracy", class_distribution(&d));
    print_matrix(&d);
    if failed.is_empty() {
        println!("acceptance: all criteria passed");
        return ExitCode::SUCCESS;
    }
    println!("acceptance: criteria {failed:?} failed");
    let gating = failed.iter().any(|id| strict || !DIRECTIONAL.contains(id));
    if gating {
        ExitCode::FAILURE
    } else {
        println!("acceptance: only directional criteria failed; set ACCEPTANCE_STRICT=1 to fail the run on them");
        ExitCode::SUCCESS
    }
}
