//! Per-class evaluation, frequency groups and run reports.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plasticity::EventRecord;
use crate::tensor::Tensor;

pub const REPORT_VERSION: u32 = 1;

/// Predicted class per row; ties resolve to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

/// `correct_c / total_c`; `None` for classes absent from `labels`.
pub fn per_class_accuracy(logits: &Tensor, labels: &[usize], num_classes: usize) -> Vec<Option<f64>> {
    per_class_from_predictions(&argmax_rows(logits), labels, num_classes)
}

pub fn per_class_from_predictions(predictions: &[usize], labels: &[usize], num_classes: usize) -> Vec<Option<f64>> {
    let mut total = vec![0usize; num_classes];
    let mut correct = vec![0usize; num_classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        total[l] += 1;
        if p == l {
            correct[l] += 1;
        }
    }
    total
        .iter()
        .zip(&correct)
        .map(|(&t, &c)| (t > 0).then(|| c as f64 / t as f64))
        .collect()
}

/// Mean over the classes that have a value.
pub fn mean_present(values: &[Option<f64>]) -> Option<f64> {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupThresholds {
    /// Classes with at least this many training samples are "many".
    pub many: usize,
    /// Classes with fewer than this many are "few".
    pub few: usize,
}

impl Default for GroupThresholds {
    fn default() -> Self {
        GroupThresholds { many: 100, few: 20 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupAccuracy {
    /// `None` when the bucket has no evaluated classes.
    pub many: Option<f64>,
    pub medium: Option<f64>,
    pub few: Option<f64>,
    pub many_classes: Vec<usize>,
    pub medium_classes: Vec<usize>,
    pub few_classes: Vec<usize>,
}

pub fn group_accuracy(per_class: &[Option<f64>], train_counts: &[usize], t: GroupThresholds) -> GroupAccuracy {
    let mut buckets = [Vec::new(), Vec::new(), Vec::new()];
    for (c, &n) in train_counts.iter().enumerate() {
        let b = if n >= t.many {
            0
        } else if n >= t.few {
            1
        } else {
            2
        };
        buckets[b].push(c);
    }
    let mean = |classes: &[usize]| mean_present(&classes.iter().map(|&c| per_class[c]).collect::<Vec<_>>());
    let [many_classes, medium_classes, few_classes] = buckets;
    GroupAccuracy {
        many: mean(&many_classes),
        medium: mean(&medium_classes),
        few: mean(&few_classes),
        many_classes,
        medium_classes,
        few_classes,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_loss: f64,
    pub test_accuracy: f64,
    pub mean_class_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub config: BTreeMap<String, String>,
    pub epochs: Vec<EpochMetrics>,
    pub train_counts: Vec<usize>,
    pub final_overall: f64,
    pub final_mean_class: f64,
    pub final_per_class: Vec<Option<f64>>,
    pub groups: GroupAccuracy,
    pub final_widths: Vec<usize>,
    pub events: Vec<EventRecord>,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map(|s| s + "\n")
            .map_err(|e| Error::state(format!("report encoding: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format {
            offset: 0,
            message: format!("report: {e}"),
        })
    }

    /// Mean accuracy over the least frequent half of the classes (by train
    /// count, ties broken by class index).
    pub fn tail_half_mean(&self) -> Option<f64> {
        let mut order: Vec<usize> = (0..self.train_counts.len()).collect();
        order.sort_by_key(|&c| (self.train_counts[c], std::cmp::Reverse(c)));
        let half = order.len() / 2;
        mean_present(&order[..half].iter().map(|&c| self.final_per_class[c]).collect::<Vec<_>>())
    }
}

pub fn emit_report(report: &RunReport, path: &Path) -> Result<()> {
    std::fs::write(path, report.to_json()?).map_err(|e| Error::io(path, e))
}

pub fn read_report(path: &Path) -> Result<RunReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    RunReport::from_json(&text)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClasswiseRow {
    pub class_index: usize,
    pub train_count: usize,
    pub accuracy: Option<f64>,
}

pub fn classwise_rows(report: &RunReport) -> Vec<ClasswiseRow> {
    report
        .train_counts
        .iter()
        .zip(&report.final_per_class)
        .enumerate()
        .map(|(class_index, (&train_count, &accuracy))| ClasswiseRow {
            class_index,
            train_count,
            accuracy,
        })
        .collect()
}

pub fn emit_classwise_csv(report: &RunReport, path: &Path) -> Result<()> {
    let io = |e: std::io::Error| Error::io(path, e);
    let mut w = csv::Writer::from_path(path).map_err(|e| io(e.into()))?;
    for row in classwise_rows(report) {
        w.serialize(row).map_err(|e| io(e.into()))?;
    }
    w.flush().map_err(io)
}

pub fn read_classwise_csv(path: &Path) -> Result<Vec<ClasswiseRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    r.deserialize()
        .map(|row| {
            row.map_err(|e| Error::Format {
                offset: e.position().map_or(0, |p| p.byte()),
                message: e.to_string(),
            })
        })
        .collect()
}
