//! AdamW and SGD with momentum.
//!
//! Moment buffers are stored as shadow copies of the network, so every
//! structural edit made to the network can be replayed on them verbatim and
//! per-neuron state follows the neuron's stable id.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Layer, NetworkState, NeuronParams};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    AdamW,
    Sgd,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::AdamW => "adamw",
            OptimizerKind::Sgd => "sgd",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "adamw" => Ok(OptimizerKind::AdamW),
            "sgd" => Ok(OptimizerKind::Sgd),
            _ => Err(format!("unknown optimizer `{s}` (expected adamw or sgd)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// SGD only.
    pub momentum: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            kind: OptimizerKind::AdamW,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            momentum: 0.9,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    pub cfg: OptimConfig,
    t: u64,
    /// First moment (AdamW) or momentum buffer (SGD).
    first: NetworkState,
    /// Second moment, AdamW only.
    second: Option<NetworkState>,
    /// Per-entry AdamW bias corrections `1 - β1^t` and `1 - β2^t`, so entries
    /// created by growth start from step zero.
    bias1: Option<NetworkState>,
    bias2: Option<NetworkState>,
}

fn zeroed(net: &NetworkState) -> NetworkState {
    let mut z = net.clone();
    z.clear_grads();
    for layer in z.layers_mut() {
        for p in layer.params_mut() {
            p.data_mut().fill(0.0);
            p.requires_grad = false;
        }
        if let Layer::Norm(n) = layer {
            n.stats.mean.fill(0.0);
            n.stats.var.fill(0.0);
        }
    }
    z
}

pub fn make_optimizer(cfg: OptimConfig, net: &NetworkState) -> Optimizer {
    Optimizer {
        cfg,
        t: 0,
        first: zeroed(net),
        second: (cfg.kind == OptimizerKind::AdamW).then(|| zeroed(net)),
        bias1: (cfg.kind == OptimizerKind::AdamW).then(|| zeroed(net)),
        bias2: (cfg.kind == OptimizerKind::AdamW).then(|| zeroed(net)),
    }
}

impl Optimizer {
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Stable ids that currently own optimizer state.
    pub fn neuron_keys(&self) -> BTreeSet<u64> {
        self.first.live_ids()
    }

    /// True when every buffer has the shape of the matching parameter.
    pub fn matches(&self, net: &NetworkState) -> bool {
        let same = |s: &NetworkState| {
            s.specs() == net.specs()
                && s.live_ids() == net.live_ids()
                && (0..net.layers().len()).all(|l| s.ids(l) == net.ids(l))
        };
        same(&self.first)
            && [&self.second, &self.bias1, &self.bias2]
                .iter()
                .all(|s| s.as_ref().is_none_or(same))
    }

    /// Moment buffers for one neuron's owned parameters.
    pub fn neuron_state(&self, layer: usize, slot: usize) -> Result<(NeuronParams, Option<NeuronParams>)> {
        let second = match &self.second {
            Some(s) => Some(s.neuron_params(layer, slot)?),
            None => None,
        };
        Ok((self.first.neuron_params(layer, slot)?, second))
    }

    fn shadows(&mut self) -> impl Iterator<Item = &mut NetworkState> {
        std::iter::once(&mut self.first)
            .chain(self.second.as_mut())
            .chain(self.bias1.as_mut())
            .chain(self.bias2.as_mut())
    }

    /// Mirrors `NetworkState::append_neurons` with zero-initialized state.
    pub fn append_neurons(&mut self, layer: usize, count: usize) -> Result<()> {
        for s in self.shadows() {
            let rl: usize = s.layers()[layer].params()[0].shape()[1..].iter().product();
            let zero = NeuronParams {
                incoming: vec![0.0; rl],
                bias: 0.0,
                gamma: 0.0,
                beta: 0.0,
            };
            s.append_neurons(layer, &vec![zero; count])?;
        }
        Ok(())
    }

    /// Mirrors `NetworkState::remove_neurons`, dropping the removed state.
    pub fn remove_neurons(&mut self, layer: usize, slots: &[usize]) -> Result<()> {
        for s in self.shadows() {
            s.remove_neurons(layer, slots)?;
        }
        Ok(())
    }

    /// Applies one update from the gradients stored on `net`.
    pub fn step(&mut self, net: &mut NetworkState) -> Result<()> {
        if !self.matches(net) {
            return Err(Error::state("optimizer state is out of step with the network"));
        }
        self.t += 1;
        let cfg = self.cfg;
        let nl = net.layers().len();
        for l in 0..nl {
            let params = net.layers_mut()[l].params_mut();
            let mut firsts = self.first.layers_mut()[l].params_mut();
            let mut seconds = optional_params(self.second.as_mut(), l, firsts.len());
            let mut bias1 = optional_params(self.bias1.as_mut(), l, firsts.len());
            let mut bias2 = optional_params(self.bias2.as_mut(), l, firsts.len());
            for ((((p, m), v), c1), c2) in params
                .into_iter()
                .zip(firsts.iter_mut())
                .zip(seconds.iter_mut())
                .zip(bias1.iter_mut())
                .zip(bias2.iter_mut())
            {
                let Some(grad) = p.grad.take() else { continue };
                let m = m.data_mut();
                let data = p.data_mut();
                match (cfg.kind, v, c1, c2) {
                    (OptimizerKind::AdamW, Some(v), Some(c1), Some(c2)) => {
                        let (v, c1, c2) = (v.data_mut(), c1.data_mut(), c2.data_mut());
                        for i in 0..data.len() {
                            let g = grad[i];
                            c1[i] = cfg.beta1 * c1[i] + (1.0 - cfg.beta1);
                            c2[i] = cfg.beta2 * c2[i] + (1.0 - cfg.beta2);
                            data[i] -= cfg.lr * cfg.weight_decay * data[i];
                            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
                            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
                            let mh = m[i] / c1[i];
                            let vh = v[i] / c2[i];
                            data[i] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
                        }
                    }
                    _ => {
                        for i in 0..data.len() {
                            let g = grad[i] + cfg.weight_decay * data[i];
                            m[i] = cfg.momentum * m[i] + g;
                            data[i] -= cfg.lr * m[i];
                        }
                    }
                }
                p.grad = Some(grad);
            }
        }
        Ok(())
    }
}

fn optional_params(shadow: Option<&mut NetworkState>, layer: usize, n: usize) -> Vec<Option<&mut Tensor>> {
    match shadow {
        Some(s) => s.layers_mut()[layer].params_mut().into_iter().map(Some).collect(),
        None => (0..n).map(|_| None).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Dense;

    fn scalar_net(w: f64) -> NetworkState {
        let layers = vec![Layer::Dense(Dense {
            weight: Tensor::new(vec![1, 1], vec![w]).unwrap().parameter(),
            bias: Tensor::zeros(&[1]).parameter(),
            mutable: false,
        })];
        NetworkState::assemble(vec![1], 1, layers, vec![]).unwrap()
    }

    fn set_grad(net: &mut NetworkState, g: f64) {
        let ps = net.layers_mut()[0].params_mut();
        let mut it = ps.into_iter();
        it.next().unwrap().grad = Some(vec![g]);
        it.next().unwrap().grad = Some(vec![0.0]);
    }

    #[test]
    fn adamw_single_step_by_hand() {
        let mut net = scalar_net(1.0);
        let cfg = OptimConfig {
            lr: 0.1,
            weight_decay: 0.01,
            ..OptimConfig::default()
        };
        let mut opt = make_optimizer(cfg, &net);
        set_grad(&mut net, 0.5);
        opt.step(&mut net).unwrap();
        // decoupled decay then a bias-corrected step of lr * g / (|g| + eps)
        let expect = 1.0 - 0.1 * 0.01 - 0.1 * 0.5 / (0.5 + 1e-8);
        let got = net.layers()[0].params()[0].data()[0];
        assert!((got - expect).abs() < 1e-15, "{got} vs {expect}");
    }

    #[test]
    fn zero_decay_is_adam() {
        let mut net = scalar_net(2.0);
        let cfg = OptimConfig {
            lr: 0.05,
            weight_decay: 0.0,
            ..OptimConfig::default()
        };
        let mut opt = make_optimizer(cfg, &net);
        let (mut m, mut v, mut p) = (0.0f64, 0.0f64, 2.0f64);
        for (t, g) in [0.3, -0.7, 0.1].into_iter().enumerate() {
            set_grad(&mut net, g);
            opt.step(&mut net).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let t = t as i32 + 1;
            p -= 0.05 * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
        }
        assert!((net.layers()[0].params()[0].data()[0] - p).abs() < 1e-14);
    }

    #[test]
    fn sgd_momentum() {
        let mut net = scalar_net(1.0);
        let cfg = OptimConfig {
            kind: OptimizerKind::Sgd,
            lr: 0.1,
            weight_decay: 0.0,
            momentum: 0.9,
            ..OptimConfig::default()
        };
        let mut opt = make_optimizer(cfg, &net);
        set_grad(&mut net, 1.0);
        opt.step(&mut net).unwrap();
        set_grad(&mut net, 1.0);
        opt.step(&mut net).unwrap();
        // buffers 1.0 then 1.9
        let got = net.layers()[0].params()[0].data()[0];
        assert!((got - (1.0 - 0.1 - 0.19)).abs() < 1e-15);
    }

    #[test]
    fn surgery_keeps_keys_in_step() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut net = NetworkState::build_mlp(3, &[4, 3], 2, &mut rng).unwrap();
        let mut opt = make_optimizer(OptimConfig::default(), &net);
        net.remove_neurons(0, &[2]).unwrap();
        opt.remove_neurons(0, &[2]).unwrap();
        assert_eq!(opt.neuron_keys(), net.live_ids());
        assert!(!opt.neuron_keys().contains(&2));
        let p = NeuronParams {
            incoming: vec![0.1; 3],
            bias: 0.0,
            gamma: 1.0,
            beta: 0.0,
        };
        net.append_neurons(0, &[p]).unwrap();
        assert!(!opt.matches(&net));
        opt.append_neurons(0, 1).unwrap();
        assert!(opt.matches(&net));
        assert_eq!(opt.neuron_keys(), net.live_ids());
        let (m, v) = opt.neuron_state(0, 3).unwrap();
        assert!(m.incoming.iter().all(|&x| x == 0.0));
        assert!(v.unwrap().incoming.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn grown_entries_start_from_step_zero() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut net = NetworkState::build_mlp(2, &[3], 2, &mut rng).unwrap();
        let cfg = OptimConfig {
            lr: 0.01,
            weight_decay: 0.0,
            ..OptimConfig::default()
        };
        let mut opt = make_optimizer(cfg, &net);
        let fill = |net: &mut NetworkState, g: f64| {
            for layer in net.layers_mut() {
                for p in layer.params_mut() {
                    p.grad = Some(vec![g; p.numel()]);
                }
            }
        };
        for _ in 0..5 {
            fill(&mut net, 0.2);
            opt.step(&mut net).unwrap();
        }
        let p = NeuronParams {
            incoming: vec![0.5, -0.5],
            bias: 0.0,
            gamma: 1.0,
            beta: 0.0,
        };
        net.append_neurons(0, &[p]).unwrap();
        opt.append_neurons(0, 1).unwrap();
        fill(&mut net, -0.3);
        opt.step(&mut net).unwrap();
        let w = net.neuron_params(0, 3).unwrap().incoming[0];
        let expect = 0.5 + 0.01 * 0.3 / (0.3 + 1e-8);
        assert!((w - expect).abs() < 1e-15, "{w} vs {expect}");
    }
}
