//! Class-imbalanced datasets: count profiles, subsampling, a synthetic
//! Gaussian mixture and the on-disk dataset cache.

use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassProfile {
    pub counts: Vec<usize>,
    pub n_max: usize,
    pub weights: Vec<f64>,
}

impl ClassProfile {
    pub fn from_counts(counts: &[usize]) -> Result<Self> {
        Ok(ClassProfile {
            counts: counts.to_vec(),
            n_max: counts.iter().copied().max().unwrap_or(0),
            weights: class_weights(counts)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
    /// Present for the training split only.
    pub profile: Option<ClassProfile>,
}

/// Train and held-out test split produced together.
#[derive(Clone, Debug, PartialEq)]
pub struct DataSplits {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

pub fn histogram(labels: &[usize], num_classes: usize) -> Vec<usize> {
    let mut h = vec![0; num_classes];
    for &l in labels {
        h[l] += 1;
    }
    h
}

impl LabeledDataset {
    pub fn new(features: Tensor, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        if features.shape().first() != Some(&labels.len()) {
            return Err(Error::dim(format!(
                "{} labels for features of shape {:?}",
                labels.len(),
                features.shape()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::input(format!("label {bad} outside [0, {num_classes})")));
        }
        let profile = match split {
            Split::Train => Some(ClassProfile::from_counts(&histogram(&labels, num_classes))?),
            Split::Test => None,
        };
        Ok(LabeledDataset {
            features,
            labels,
            num_classes,
            split,
            profile,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Shape of a single sample.
    pub fn sample_shape(&self) -> &[usize] {
        &self.features.shape()[1..]
    }

    pub fn histogram(&self) -> Vec<usize> {
        histogram(&self.labels, self.num_classes)
    }

    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let x = self.features.select_rows(indices);
        let y = indices.iter().map(|&i| self.labels[i]).collect();
        (x, y)
    }
}

/// Per-class counts decaying exponentially from `n_max` to `n_max / p`.
pub fn exponential_imbalance_counts(n_max: usize, num_classes: usize, p: f64) -> Result<Vec<usize>> {
    if !(p >= 1.0) {
        return Err(Error::input(format!("imbalance factor must be at least 1, got {p}")));
    }
    if num_classes == 0 {
        return Err(Error::input("need at least one class"));
    }
    if num_classes == 1 {
        return Ok(vec![n_max.max(1)]);
    }
    let last = (num_classes - 1) as f64;
    Ok((0..num_classes)
        .map(|c| {
            let n = (n_max as f64 * p.powf(-(c as f64) / last)).round() as usize;
            n.max(1)
        })
        .collect())
}

/// `w_c = N_max / N_c`.
pub fn class_weights(counts: &[usize]) -> Result<Vec<f64>> {
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::input(format!("class {c} has no samples")));
    }
    let n_max = counts.iter().copied().max().unwrap_or(1) as f64;
    Ok(counts.iter().map(|&n| n_max / n as f64).collect())
}

/// Seeded per-class subsample without replacement. Test splits are returned
/// unchanged.
pub fn subsample_to_profile(ds: &LabeledDataset, counts: &[usize], seed: u64) -> Result<LabeledDataset> {
    if ds.split == Split::Test {
        return Ok(ds.clone());
    }
    if counts.len() != ds.num_classes {
        return Err(Error::input(format!(
            "{} counts for {} classes",
            counts.len(),
            ds.num_classes
        )));
    }
    let mut by_class = vec![Vec::new(); ds.num_classes];
    for (i, &l) in ds.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::new();
    for (c, members) in by_class.iter().enumerate() {
        if members.len() < counts[c] {
            return Err(Error::input(format!(
                "class {c} has {} samples, {} requested",
                members.len(),
                counts[c]
            )));
        }
        keep.extend(
            index::sample(&mut rng, members.len(), counts[c])
                .into_iter()
                .map(|j| members[j]),
        );
    }
    keep.sort_unstable();
    let (x, y) = ds.batch(&keep);
    LabeledDataset::new(x, y, ds.num_classes, ds.split)
}

/// Unit-norm class directions: orthonormal when they fit in `dim`, otherwise
/// independent random directions.
fn class_directions(rng: &mut ChaCha8Rng, num_classes: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(num_classes);
    while dirs.len() < num_classes {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        if num_classes <= dim {
            for d in &dirs {
                let proj: f64 = v.iter().zip(d).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(d).for_each(|(a, b)| *a -= proj * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue;
        }
        v.iter_mut().for_each(|a| *a /= norm);
        dirs.push(v);
    }
    dirs
}

fn draw(
    rng: &mut ChaCha8Rng,
    means: &[Vec<f64>],
    counts: &[usize],
    split: Split,
) -> Result<LabeledDataset> {
    let dim = means[0].len();
    let total: usize = counts.iter().sum();
    let mut data = Vec::with_capacity(total * dim);
    let mut labels = Vec::with_capacity(total);
    for (c, &n) in counts.iter().enumerate() {
        for _ in 0..n {
            data.extend(means[c].iter().map(|m| m + Distribution::<f64>::sample(&StandardNormal, rng)));
            labels.push(c);
        }
    }
    LabeledDataset::new(Tensor::new(vec![total, dim], data)?, labels, counts.len(), split)
}

/// Isotropic unit-variance Gaussians centred at `separation` times a seeded
/// unit direction per class. The training split follows `counts`; the test
/// split has `test_per_class` samples of every class.
pub fn synth_gaussian_mixture(
    num_classes: usize,
    dim: usize,
    separation: f64,
    counts: &[usize],
    test_per_class: usize,
    seed: u64,
) -> Result<DataSplits> {
    if !(separation >= 0.0) {
        return Err(Error::input(format!("separation must be nonnegative, got {separation}")));
    }
    if num_classes == 0 || dim == 0 {
        return Err(Error::input("need at least one class and one dimension"));
    }
    if counts.len() != num_classes {
        return Err(Error::input(format!("{} counts for {num_classes} classes", counts.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<Vec<f64>> = class_directions(&mut rng, num_classes, dim)
        .into_iter()
        .map(|d| d.into_iter().map(|a| a * separation).collect())
        .collect();
    let train = draw(&mut rng, &means, counts, Split::Train)?;
    let test = draw(&mut rng, &means, &vec![test_per_class; num_classes], Split::Test)?;
    Ok(DataSplits { train, test })
}

#[derive(Serialize, Deserialize)]
struct CacheHeader {
    kind: String,
    shape: Vec<usize>,
    num_classes: usize,
    split: Split,
}

const CACHE_KIND: &str = "dataset";

pub fn save_dataset(ds: &LabeledDataset, path: &Path) -> Result<()> {
    let header = CacheHeader {
        kind: CACHE_KIND.into(),
        shape: ds.features.shape().to_vec(),
        num_classes: ds.num_classes,
        split: ds.split,
    };
    let labels: Vec<f64> = ds.labels.iter().map(|&l| l as f64).collect();
    container::write(path, &header, &[ds.features.data(), &labels])
}

pub fn load_dataset(path: &Path) -> Result<LabeledDataset> {
    let (header, mut arrays): (CacheHeader, _) = container::read(path)?;
    if header.kind != CACHE_KIND || arrays.len() != 2 {
        return Err(Error::Format {
            offset: 0,
            message: "not a dataset cache".into(),
        });
    }
    let labels = arrays.pop().expect("two arrays").into_iter().map(|l| l as usize).collect();
    let features = Tensor::new(header.shape, arrays.pop().expect("two arrays"))?;
    LabeledDataset::new(features, labels, header.num_classes, header.split)
}
