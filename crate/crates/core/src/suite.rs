//! Seed sweeps over named configuration cells with mean ± std aggregates.
//!
//! Layout: `<out>/<suite>/<cell>/<seed>/report.json` (plus `classwise.csv`)
//! and `<out>/<suite>/aggregate.csv`.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::Serialize;

use crate::config::TrainConfig;
use crate::data::DataSplits;
use crate::error::{Error, Result};
use crate::ledger::Criterion;
use crate::report::{emit_classwise_csv, emit_report, RunReport};
use crate::trainer::{prepare_data, run};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SuiteKind {
    BaselineVsOurs,
    AlphaSweep,
    CriteriaCompare,
    Ablation,
}

impl SuiteKind {
    pub const ALL: [SuiteKind; 4] = [
        SuiteKind::BaselineVsOurs,
        SuiteKind::AlphaSweep,
        SuiteKind::CriteriaCompare,
        SuiteKind::Ablation,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SuiteKind::BaselineVsOurs => "baseline_vs_ours",
            SuiteKind::AlphaSweep => "alpha_sweep",
            SuiteKind::CriteriaCompare => "criteria_compare",
            SuiteKind::Ablation => "ablation",
        }
    }
}

impl fmt::Display for SuiteKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SuiteKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        SuiteKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown suite `{s}`"))
    }
}

pub const ALPHA_GRID: [f64; 6] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5];

/// (nam, gr, ws, gda) rows of the ablation.
pub const ABLATION_ROWS: [[bool; 4]; 6] = [
    [false, false, false, false],
    [true, false, false, false],
    [true, true, false, false],
    [true, false, true, false],
    [true, true, true, false],
    [true, true, true, true],
];

const FLAG_KEYS: [&str; 4] = ["nam", "gr", "ws", "gda"];

/// A named set of overrides applied on top of the suite's base config.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub name: String,
    pub overrides: Vec<(String, String)>,
}

impl Cell {
    fn new(name: impl Into<String>, overrides: &[(&str, String)]) -> Self {
        Cell {
            name: name.into(),
            overrides: overrides.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
        }
    }

    pub fn config(&self, base: &TrainConfig, seed: u64) -> Result<TrainConfig> {
        let mut cfg = base.clone();
        for (k, v) in &self.overrides {
            cfg.set(k, v)?;
        }
        cfg.seed = seed;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn flags(row: [bool; 4]) -> Vec<(&'static str, String)> {
    FLAG_KEYS.iter().zip(row).map(|(k, v)| (*k, v.to_string())).collect()
}

pub fn flag_label(row: [bool; 4]) -> String {
    let on: Vec<&str> = FLAG_KEYS.iter().zip(row).filter(|(_, v)| *v).map(|(k, _)| *k).collect();
    if on.is_empty() {
        "none".into()
    } else {
        on.join("+")
    }
}

pub fn ablation_cell(row: [bool; 4]) -> Cell {
    Cell::new(flag_label(row), &flags(row))
}

pub fn cells(kind: SuiteKind, alphas: &[f64]) -> Vec<Cell> {
    let full = flags([true; 4]);
    match kind {
        SuiteKind::BaselineVsOurs => vec![
            Cell::new("baseline", &flags([false; 4])),
            Cell::new("ours", &full),
        ],
        SuiteKind::AlphaSweep => alphas
            .iter()
            .map(|a| {
                let mut o = full.clone();
                o.push(("alpha", a.to_string()));
                Cell::new(format!("alpha_{a}"), &o)
            })
            .collect(),
        SuiteKind::CriteriaCompare => Criterion::ALL
            .iter()
            .map(|c| {
                let mut o = full.clone();
                o.push(("criterion", c.to_string()));
                Cell::new(c.as_str(), &o)
            })
            .collect(),
        SuiteKind::Ablation => ABLATION_ROWS.iter().map(|&r| ablation_cell(r)).collect(),
    }
}

/// Outcome of every seed of one cell, in seed order.
#[derive(Clone, Debug)]
pub struct CellResult {
    pub cell: Cell,
    pub runs: Vec<(u64, std::result::Result<RunReport, String>)>,
}

impl CellResult {
    pub fn reports(&self) -> impl Iterator<Item = &RunReport> {
        self.runs.iter().filter_map(|(_, r)| r.as_ref().ok())
    }
}

/// Fields of the synthetic or ingested dataset; runs agreeing on these share
/// one copy of the data.
fn data_key(cfg: &TrainConfig) -> String {
    ["dataset", "num_classes", "dim", "separation", "n_max", "p", "test_per_class", "data_seed", "arch"]
        .iter()
        .map(|k| cfg.get(k).unwrap_or_default())
        .collect::<Vec<_>>()
        .join("|")
}

/// Runs every (cell, seed) pair on up to `jobs` threads. Each run is
/// single-threaded and seeded, so results do not depend on `jobs`.
/// `sink` sees each finished run (for example to write it to disk).
pub fn run_grid(
    base: &TrainConfig,
    cells: &[Cell],
    seeds: &[u64],
    jobs: usize,
    sink: &(dyn Fn(&Cell, u64, &std::result::Result<RunReport, String>) + Sync),
) -> Vec<CellResult> {
    let tasks: Vec<(usize, u64)> = (0..cells.len())
        .flat_map(|c| seeds.iter().map(move |&s| (c, s)))
        .collect();
    let results: Mutex<Vec<Option<std::result::Result<RunReport, String>>>> =
        Mutex::new(vec![None; tasks.len()]);
    let cache: Mutex<HashMap<String, Arc<DataSplits>>> = Mutex::new(HashMap::new());
    let next = AtomicUsize::new(0);
    let data_for = |cfg: &TrainConfig| -> Result<Arc<DataSplits>> {
        let key = data_key(cfg);
        if let Some(d) = cache.lock().expect("cache lock").get(&key) {
            return Ok(d.clone());
        }
        let d = Arc::new(prepare_data(cfg)?);
        cache.lock().expect("cache lock").insert(key, d.clone());
        Ok(d)
    };
    std::thread::scope(|scope| {
        for _ in 0..jobs.max(1).min(tasks.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(c, seed)) = tasks.get(i) else { break };
                let outcome = cells[c]
                    .config(base, seed)
                    .and_then(|cfg| run(&cfg, data_for(&cfg)?.as_ref()))
                    .map_err(|e| e.to_string());
                sink(&cells[c], seed, &outcome);
                results.lock().expect("results lock")[i] = Some(outcome);
            });
        }
    });
    let mut results = results.into_inner().expect("results lock").into_iter();
    cells
        .iter()
        .map(|cell| CellResult {
            cell: cell.clone(),
            runs: seeds
                .iter()
                .map(|&s| (s, results.next().flatten().expect("every task ran")))
                .collect(),
        })
        .collect()
}

/// Mean and sample standard deviation; `None` for no values.
pub fn mean_std(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (Some(mean), Some(0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (Some(mean), Some(var.sqrt()))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AggregateRow {
    pub cell: String,
    pub runs: usize,
    pub failures: usize,
    pub overall_mean: Option<f64>,
    pub overall_std: Option<f64>,
    pub mean_class_mean: Option<f64>,
    pub mean_class_std: Option<f64>,
    pub many_mean: Option<f64>,
    pub many_std: Option<f64>,
    pub medium_mean: Option<f64>,
    pub medium_std: Option<f64>,
    pub few_mean: Option<f64>,
    pub few_std: Option<f64>,
    pub tail_half_mean: Option<f64>,
    pub tail_half_std: Option<f64>,
}

/// Aggregate of one cell; a function of its reports alone. Statistics are
/// absent when no run has a value (all failed, or an empty group).
pub fn aggregate_cell(name: &str, reports: &[&RunReport], failures: usize) -> AggregateRow {
    let collect = |f: &dyn Fn(&RunReport) -> Option<f64>| -> (Option<f64>, Option<f64>) {
        mean_std(&reports.iter().filter_map(|r| f(r)).collect::<Vec<_>>())
    };
    let (overall_mean, overall_std) = collect(&|r| Some(r.final_overall));
    let (mean_class_mean, mean_class_std) = collect(&|r| Some(r.final_mean_class));
    let (many_mean, many_std) = collect(&|r| r.groups.many);
    let (medium_mean, medium_std) = collect(&|r| r.groups.medium);
    let (few_mean, few_std) = collect(&|r| r.groups.few);
    let (tail_half_mean, tail_half_std) = collect(&|r| r.tail_half_mean());
    AggregateRow {
        cell: name.to_string(),
        runs: reports.len(),
        failures,
        overall_mean,
        overall_std,
        mean_class_mean,
        mean_class_std,
        many_mean,
        many_std,
        medium_mean,
        medium_std,
        few_mean,
        few_std,
        tail_half_mean,
        tail_half_std,
    }
}

pub fn aggregate(results: &[CellResult]) -> Vec<AggregateRow> {
    results
        .iter()
        .map(|r| {
            let reports: Vec<&RunReport> = r.reports().collect();
            aggregate_cell(&r.cell.name, &reports, r.runs.len() - reports.len())
        })
        .collect()
}

pub fn write_aggregate_csv(path: &Path, rows: &[AggregateRow]) -> Result<()> {
    let io = |e: std::io::Error| Error::io(path, e);
    let mut w = csv::Writer::from_path(path).map_err(|e| io(e.into()))?;
    for row in rows {
        w.serialize(row).map_err(|e| io(e.into()))?;
    }
    w.flush().map_err(io)
}

#[derive(Clone, Debug)]
pub struct ExperimentSuite {
    pub kind: SuiteKind,
    pub base: TrainConfig,
    pub cells: Vec<Cell>,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
}

pub struct SuiteSummary {
    pub dir: PathBuf,
    pub results: Vec<CellResult>,
    pub aggregate: Vec<AggregateRow>,
}

impl ExperimentSuite {
    pub fn new(kind: SuiteKind, base: TrainConfig, seeds: Vec<u64>, out: PathBuf, alphas: &[f64]) -> Result<Self> {
        if seeds.is_empty() {
            return Err(Error::config("seeds", "a suite needs at least one seed"));
        }
        base.validate()?;
        Ok(ExperimentSuite {
            kind,
            cells: cells(kind, alphas),
            base,
            seeds,
            out,
        })
    }

    pub fn dir(&self) -> PathBuf {
        self.out.join(self.kind.as_str())
    }

    /// Runs the sweep. Individual run failures are written next to the cell
    /// (`error.txt`) and counted in the aggregate; the suite carries on.
    pub fn run(&self, jobs: usize) -> Result<SuiteSummary> {
        let dir = self.dir();
        if dir.exists() {
            return Err(Error::config(
                "out",
                format!("{} already exists; use a fresh output directory", dir.display()),
            ));
        }
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let write_errors: Mutex<Vec<Error>> = Mutex::new(Vec::new());
        let sink = |cell: &Cell, seed: u64, outcome: &std::result::Result<RunReport, String>| {
            let run_dir = dir.join(&cell.name).join(seed.to_string());
            let res = std::fs::create_dir_all(&run_dir)
                .map_err(|e| Error::io(&run_dir, e))
                .and_then(|_| match outcome {
                    Ok(report) => emit_report(report, &run_dir.join("report.json"))
                        .and_then(|_| emit_classwise_csv(report, &run_dir.join("classwise.csv"))),
                    Err(msg) => {
                        let p = run_dir.join("error.txt");
                        std::fs::write(&p, format!("{msg}\n")).map_err(|e| Error::io(&p, e))
                    }
                });
            if let Err(e) = res {
                write_errors.lock().expect("error lock").push(e);
            }
        };
        let results = run_grid(&self.base, &self.cells, &self.seeds, jobs, &sink);
        if let Some(e) = write_errors.into_inner().expect("error lock").into_iter().next() {
            return Err(e);
        }
        let aggregate = aggregate(&results);
        write_aggregate_csv(&dir.join("aggregate.csv"), &aggregate)?;
        Ok(SuiteSummary { dir, results, aggregate })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cell_counts() {
        assert_eq!(cells(SuiteKind::AlphaSweep, &ALPHA_GRID).len(), 6);
        assert_eq!(cells(SuiteKind::CriteriaCompare, &ALPHA_GRID).len(), 4);
        assert_eq!(cells(SuiteKind::BaselineVsOurs, &ALPHA_GRID).len(), 2);
        let ab = cells(SuiteKind::Ablation, &ALPHA_GRID);
        let names: Vec<&str> = ab.iter().map(|c| c.name.as_str()).collect();
        assert_eq!(names, ["none", "nam", "nam+gr", "nam+ws", "nam+gr+ws", "nam+gr+ws+gda"]);
    }

    #[test]
    fn mean_std_values() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, Some(2.0));
        assert!((s.unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(mean_std(&[4.0]), (Some(4.0), Some(0.0)));
        assert_eq!(mean_std(&[]), (None, None));
    }

    #[test]
    fn seeds_required() {
        let r = ExperimentSuite::new(
            SuiteKind::Ablation,
            TrainConfig::default(),
            vec![],
            PathBuf::from("x"),
            &ALPHA_GRID,
        );
        assert!(r.is_err());
    }
}
