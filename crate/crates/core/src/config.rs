//! Flat `key = value` run configuration.
//!
//! Every key has a default; unknown keys and unparsable values are errors
//! naming the key. [`KEYS`] is the authoritative list.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ledger::{Criterion, LedgerMode, Magnitude};
use crate::optim::{OptimConfig, OptimizerKind};
use crate::plasticity::{InitScheme, PlasticityConfig};

#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSource {
    Synth,
    /// Directory holding `train-images-idx3-ubyte`, `train-labels-idx1-ubyte`,
    /// `t10k-images-idx3-ubyte` and `t10k-labels-idx1-ubyte`.
    Idx(String),
}

impl Display for DatasetSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DatasetSource::Synth => f.write_str("synth"),
            DatasetSource::Idx(p) => write!(f, "idx:{p}"),
        }
    }
}

impl FromStr for DatasetSource {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "synth" => Ok(DatasetSource::Synth),
            _ => match s.strip_prefix("idx:") {
                Some(p) if !p.is_empty() => Ok(DatasetSource::Idx(p.to_string())),
                _ => Err(format!("expected `synth` or `idx:<dir>`, got `{s}`")),
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arch {
    Mlp,
    Cnn,
}

impl Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Arch::Mlp => "mlp",
            Arch::Cnn => "cnn",
        })
    }
}

impl FromStr for Arch {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "mlp" => Ok(Arch::Mlp),
            "cnn" => Ok(Arch::Cnn),
            _ => Err(format!("expected `mlp` or `cnn`, got `{s}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    /// Weight each sample's loss by its class weight.
    pub class_weighted_loss: bool,
    pub plasticity: PlasticityConfig,
    pub criterion: Criterion,
    pub ledger_mode: LedgerMode,
    pub ema_decay: f64,
    pub magnitude: Magnitude,

    pub dataset: DatasetSource,
    pub num_classes: usize,
    pub dim: usize,
    pub separation: f64,
    pub n_max: usize,
    pub p: f64,
    pub test_per_class: usize,
    pub data_seed: u64,

    pub arch: Arch,
    pub hidden: Vec<usize>,
    pub channels: Vec<usize>,
    pub residual: bool,

    pub many_threshold: usize,
    pub few_threshold: usize,
    pub dump_scores: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            epochs: 60,
            batch_size: 64,
            optim: OptimConfig::default(),
            class_weighted_loss: false,
            plasticity: PlasticityConfig::default(),
            criterion: Criterion::AccumulatedGradient,
            ledger_mode: LedgerMode::Mean,
            ema_decay: 0.9,
            magnitude: Magnitude::L2,
            dataset: DatasetSource::Synth,
            num_classes: 10,
            dim: 16,
            separation: 3.0,
            n_max: 500,
            p: 100.0,
            test_per_class: 200,
            data_seed: 0,
            arch: Arch::Mlp,
            hidden: vec![128, 64],
            channels: vec![8, 16],
            residual: false,
            many_threshold: 100,
            few_threshold: 20,
            dump_scores: false,
        }
    }
}

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "run seed (weight init, batch order, plasticity draws)"),
    ("epochs", "number of training epochs"),
    ("batch_size", "mini-batch size"),
    ("optimizer", "adamw or sgd"),
    ("lr", "learning rate"),
    ("beta1", "AdamW first-moment decay"),
    ("beta2", "AdamW second-moment decay"),
    ("eps", "AdamW denominator epsilon"),
    ("weight_decay", "decoupled (AdamW) or L2 (SGD) weight decay"),
    ("momentum", "SGD momentum"),
    ("class_weighted_loss", "weight the loss by N_max/N_c per sample"),
    ("alpha", "fraction of each mutable layer modified per event"),
    ("e_mod", "epochs between modification events"),
    ("sigma", "std of the norm-parameter perturbation for new neurons"),
    ("nam", "enable neuron addition and removal"),
    ("gr", "enable class-based gradient reweighting"),
    ("ws", "enable consumer weight scaling"),
    ("gda", "enable norm-parameter perturbation of new neurons"),
    ("init_scheme", "fresh or clone"),
    ("criterion", "accumulated_gradient, final_batch_gradient, l1_norm or random"),
    ("ledger_mode", "mean or ema"),
    ("ema_decay", "decay used by the ema ledger mode"),
    ("magnitude", "gradient block reduction: l2 or l1"),
    ("dataset", "synth or idx:<dir>"),
    ("num_classes", "classes of the synthetic mixture"),
    ("dim", "feature dimension of the synthetic mixture"),
    ("separation", "distance of synthetic class means from the origin"),
    ("n_max", "training samples of the largest class"),
    ("p", "imbalance factor (largest / smallest class)"),
    ("test_per_class", "balanced synthetic test samples per class"),
    ("data_seed", "seed for dataset synthesis and subsampling"),
    ("arch", "mlp or cnn"),
    ("hidden", "comma-separated MLP hidden widths"),
    ("channels", "comma-separated CNN block widths"),
    ("residual", "add a residual pair to every CNN block"),
    ("many_threshold", "minimum train count of the many group"),
    ("few_threshold", "train counts below this form the few group"),
    ("dump_scores", "write per-event neuron scores as CSV"),
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e: T::Err| Error::config(key, format!("cannot parse `{value}`: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "1" | "yes" => Ok(true),
        "false" | "off" | "0" | "no" => Ok(false),
        _ => Err(Error::config(key, format!("expected a boolean, got `{value}`"))),
    }
}

fn parse_widths(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|w| parse::<usize>(key, w.trim()))
        .collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn enum_str<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|j| j.as_str().map(str::to_string))
        .unwrap_or_default()
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "optimizer" => self.optim.kind = parse::<OptimizerKind>(key, v)?,
            "lr" => self.optim.lr = parse(key, v)?,
            "beta1" => self.optim.beta1 = parse(key, v)?,
            "beta2" => self.optim.beta2 = parse(key, v)?,
            "eps" => self.optim.eps = parse(key, v)?,
            "weight_decay" => self.optim.weight_decay = parse(key, v)?,
            "momentum" => self.optim.momentum = parse(key, v)?,
            "class_weighted_loss" => self.class_weighted_loss = parse_bool(key, v)?,
            "alpha" => self.plasticity.alpha = parse(key, v)?,
            "e_mod" => self.plasticity.e_mod = parse(key, v)?,
            "sigma" => self.plasticity.sigma = parse(key, v)?,
            "nam" => self.plasticity.nam = parse_bool(key, v)?,
            "gr" => self.plasticity.gr = parse_bool(key, v)?,
            "ws" => self.plasticity.ws = parse_bool(key, v)?,
            "gda" => self.plasticity.gda = parse_bool(key, v)?,
            "init_scheme" => self.plasticity.init_scheme = parse::<InitScheme>(key, v)?,
            "criterion" => self.criterion = parse::<Criterion>(key, v)?,
            "ledger_mode" => {
                self.ledger_mode = match v {
                    "mean" => LedgerMode::Mean,
                    "ema" => LedgerMode::Ema,
                    _ => return Err(Error::config(key, format!("expected mean or ema, got `{v}`"))),
                }
            }
            "ema_decay" => self.ema_decay = parse(key, v)?,
            "magnitude" => {
                self.magnitude = match v {
                    "l2" => Magnitude::L2,
                    "l1" => Magnitude::L1,
                    _ => return Err(Error::config(key, format!("expected l2 or l1, got `{v}`"))),
                }
            }
            "dataset" => self.dataset = parse::<DatasetSource>(key, v)?,
            "num_classes" => self.num_classes = parse(key, v)?,
            "dim" => self.dim = parse(key, v)?,
            "separation" => self.separation = parse(key, v)?,
            "n_max" => self.n_max = parse(key, v)?,
            "p" => self.p = parse(key, v)?,
            "test_per_class" => self.test_per_class = parse(key, v)?,
            "data_seed" => self.data_seed = parse(key, v)?,
            "arch" => self.arch = parse::<Arch>(key, v)?,
            "hidden" => self.hidden = parse_widths(key, v)?,
            "channels" => self.channels = parse_widths(key, v)?,
            "residual" => self.residual = parse_bool(key, v)?,
            "many_threshold" => self.many_threshold = parse(key, v)?,
            "few_threshold" => self.few_threshold = parse(key, v)?,
            "dump_scores" => self.dump_scores = parse_bool(key, v)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "seed" => self.seed.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "optimizer" => self.optim.kind.to_string(),
            "lr" => self.optim.lr.to_string(),
            "beta1" => self.optim.beta1.to_string(),
            "beta2" => self.optim.beta2.to_string(),
            "eps" => self.optim.eps.to_string(),
            "weight_decay" => self.optim.weight_decay.to_string(),
            "momentum" => self.optim.momentum.to_string(),
            "class_weighted_loss" => self.class_weighted_loss.to_string(),
            "alpha" => self.plasticity.alpha.to_string(),
            "e_mod" => self.plasticity.e_mod.to_string(),
            "sigma" => self.plasticity.sigma.to_string(),
            "nam" => self.plasticity.nam.to_string(),
            "gr" => self.plasticity.gr.to_string(),
            "ws" => self.plasticity.ws.to_string(),
            "gda" => self.plasticity.gda.to_string(),
            "init_scheme" => self.plasticity.init_scheme.to_string(),
            "criterion" => self.criterion.to_string(),
            "ledger_mode" => enum_str(&self.ledger_mode),
            "ema_decay" => self.ema_decay.to_string(),
            "magnitude" => enum_str(&self.magnitude),
            "dataset" => self.dataset.to_string(),
            "num_classes" => self.num_classes.to_string(),
            "dim" => self.dim.to_string(),
            "separation" => self.separation.to_string(),
            "n_max" => self.n_max.to_string(),
            "p" => self.p.to_string(),
            "test_per_class" => self.test_per_class.to_string(),
            "data_seed" => self.data_seed.to_string(),
            "arch" => self.arch.to_string(),
            "hidden" => join(&self.hidden),
            "channels" => join(&self.channels),
            "residual" => self.residual.to_string(),
            "many_threshold" => self.many_threshold.to_string(),
            "few_threshold" => self.few_threshold.to_string(),
            "dump_scores" => self.dump_scores.to_string(),
            _ => return None,
        })
    }

    /// All keys with their current values, in [`KEYS`] order.
    pub fn pairs(&self) -> Vec<(String, String)> {
        KEYS.iter()
            .map(|(k, _)| (k.to_string(), self.get(k).expect("every listed key is readable")))
            .collect()
    }

    pub fn to_text(&self) -> String {
        self.pairs().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Hex SHA-256 of the canonical text form.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_text().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Applies `key = value` lines over `self`. Blank lines and `#` comments
    /// are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}", lineno + 1), format!("expected `key = value`, got `{line}`"))
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        TrainConfig::from_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, m: &str| Err(Error::config(k, m));
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if self.plasticity.e_mod == 0 || self.plasticity.e_mod > self.epochs {
            return bad("e_mod", "must lie in [1, epochs]");
        }
        if !(0.0..=1.0).contains(&self.plasticity.alpha) {
            return bad("alpha", "must lie in [0, 1]");
        }
        if !(self.plasticity.sigma > 0.0) {
            return bad("sigma", "must be positive");
        }
        if !(self.optim.lr >= 0.0) {
            return bad("lr", "must be nonnegative");
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad("ema_decay", "must lie in [0, 1)");
        }
        if !(self.p >= 1.0) {
            return bad("p", "must be at least 1");
        }
        if self.num_classes == 0 || self.dim == 0 || self.n_max == 0 {
            return bad("num_classes", "num_classes, dim and n_max must be positive");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden", "needs positive widths");
        }
        if self.channels.is_empty() || self.channels.contains(&0) {
            return bad("channels", "needs positive widths");
        }
        if self.few_threshold > self.many_threshold {
            return bad("few_threshold", "must not exceed many_threshold");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_roundtrip() {
        let mut cfg = TrainConfig::default();
        cfg.set("hidden", "32, 16").unwrap();
        cfg.set("criterion", "l1_norm").unwrap();
        cfg.set("dataset", "idx:/tmp/mnist").unwrap();
        cfg.set("ledger_mode", "ema").unwrap();
        let back = TrainConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn every_key_reads_and_writes() {
        let cfg = TrainConfig::default();
        for (k, _) in KEYS {
            let v = cfg.get(k).unwrap();
            let mut c = TrainConfig::default();
            c.set(k, &v).unwrap();
            assert_eq!(c, cfg, "{k}");
        }
    }

    #[test]
    fn unknown_key_is_named() {
        let err = TrainConfig::from_text("epochs = 3\ne_mod = 1\nlearning_rate = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
        let err = TrainConfig::from_text("alpha = lots").unwrap_err();
        assert!(err.to_string().contains("alpha"));
        assert!(TrainConfig::from_text("epochs = 5\ne_mod = 6").is_err());
    }

    #[test]
    fn comments_and_blanks() {
        let cfg = TrainConfig::from_text("# run\n\nseed = 4 # trailing\n").unwrap();
        assert_eq!(cfg.seed, 4);
    }
}
