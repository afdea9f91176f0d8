//! Paired neuron growth and pruning.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ledger::Criterion;
use crate::model::{he_row, NetworkState, NeuronParams, NeuronRef};
use crate::optim::Optimizer;

/// How incoming weights of added neurons are chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitScheme {
    /// He-normal incoming weights, zero outgoing weights.
    Fresh,
    /// Copy of a top-scoring neuron with symmetric noise; the source's
    /// outgoing weights are split between the pair.
    Clone,
}

impl fmt::Display for InitScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InitScheme::Fresh => "fresh",
            InitScheme::Clone => "clone",
        })
    }
}

impl FromStr for InitScheme {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "fresh" => Ok(InitScheme::Fresh),
            "clone" => Ok(InitScheme::Clone),
            _ => Err(format!("unknown init scheme `{s}` (expected fresh or clone)")),
        }
    }
}

/// Std of the noise added to cloned incoming weights.
pub const CLONE_NOISE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlasticityConfig {
    pub alpha: f64,
    pub e_mod: usize,
    /// Std of the perturbation applied to new neurons' norm parameters.
    pub sigma: f64,
    pub nam: bool,
    pub gr: bool,
    pub ws: bool,
    pub gda: bool,
    pub init_scheme: InitScheme,
}

impl Default for PlasticityConfig {
    fn default() -> Self {
        PlasticityConfig {
            alpha: 0.3,
            e_mod: 10,
            sigma: 0.1,
            nam: true,
            gr: true,
            ws: true,
            gda: true,
            init_scheme: InitScheme::Fresh,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub layer: usize,
    /// Lowest-scoring slots, in ascending score order.
    pub prune_slots: Vec<usize>,
    pub add_count: usize,
    /// Highest-scoring slots, used as sources by the clone scheme.
    pub top_slots: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModificationPlan {
    pub epoch: usize,
    pub criterion: Criterion,
    pub alpha: f64,
    pub layers: Vec<LayerPlan>,
}

impl ModificationPlan {
    pub fn is_empty(&self) -> bool {
        self.layers.iter().all(|l| l.add_count == 0 && l.prune_slots.is_empty())
    }
}

/// `floor(alpha * n)`, robust to representation error in `alpha`.
pub fn modification_count(alpha: f64, n: usize) -> usize {
    (alpha * n as f64 + 1e-9).floor() as usize
}

pub fn plan_modification(
    scores: &BTreeMap<NeuronRef, f64>,
    net: &NetworkState,
    alpha: f64,
    epoch: usize,
    criterion: Criterion,
) -> Result<ModificationPlan> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::input(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    let mut layers = Vec::new();
    for layer in net.mutable_layers() {
        let mut ranked = Vec::with_capacity(net.width(layer));
        for (slot, &id) in net.ids(layer).iter().enumerate() {
            let n = NeuronRef { layer, slot, id };
            let s = *scores
                .get(&n)
                .ok_or_else(|| Error::Plan(format!("no score for neuron {id} (layer {layer} slot {slot})")))?;
            if !s.is_finite() {
                return Err(Error::Plan(format!("score of neuron {id} is not finite")));
            }
            ranked.push((s, slot));
        }
        ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let k = modification_count(alpha, ranked.len());
        let prune_slots = ranked[..k].iter().map(|&(_, s)| s).collect();
        let mut top: Vec<(f64, usize)> = ranked.clone();
        top.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        layers.push(LayerPlan {
            layer,
            prune_slots,
            add_count: k,
            top_slots: top[..k].iter().map(|&(_, s)| s).collect(),
        });
    }
    Ok(ModificationPlan {
        epoch,
        criterion,
        alpha,
        layers,
    })
}

/// `s = sqrt(c_old / c_new)`.
pub fn weight_scale_factor(c_old: usize, c_new: usize) -> Result<f64> {
    if c_old == 0 || c_new == 0 {
        return Err(Error::input(format!("channel counts must be positive ({c_old}, {c_new})")));
    }
    Ok((c_old as f64 / c_new as f64).sqrt())
}

/// Sets γ and β of each neuron's norm entry to `1 + ε` and `0 + ε'` with
/// `ε, ε' ~ N(0, σ²)`. Neurons without a norm layer are skipped; the returned
/// notes say which.
pub fn randomize_norm_params<R: Rng + ?Sized>(
    net: &mut NetworkState,
    neurons: &[NeuronRef],
    sigma: f64,
    rng: &mut R,
) -> Result<Vec<String>> {
    if !(sigma > 0.0) {
        return Err(Error::input(format!("sigma must be positive, got {sigma}")));
    }
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::input(e.to_string()))?;
    let mut notes = Vec::new();
    for n in neurons {
        if net.norm_of(n.layer).is_none() {
            notes.push(format!("neuron {} in layer {} has no norm parameters", n.id, n.layer));
            continue;
        }
        let mut p = net.neuron_params(n.layer, n.slot)?;
        p.gamma = 1.0 + noise.sample(rng);
        p.beta = noise.sample(rng);
        net.set_neuron_params(n.layer, n.slot, &p)?;
    }
    Ok(notes)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerEvent {
    pub layer: usize,
    pub width_before: usize,
    pub width_after: usize,
    pub pruned_ids: Vec<u64>,
    pub added_ids: Vec<u64>,
    /// Consumer scale factors, grow step then prune step.
    pub scale_factors: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub epoch: usize,
    pub criterion: Criterion,
    pub alpha: f64,
    pub layers: Vec<LayerEvent>,
}

fn new_neurons<R: Rng + ?Sized>(
    net: &NetworkState,
    lp: &LayerPlan,
    scheme: InitScheme,
    rng: &mut R,
) -> Result<Vec<NeuronParams>> {
    match scheme {
        InitScheme::Fresh => Ok((0..lp.add_count)
            .map(|_| NeuronParams {
                incoming: he_row(net, lp.layer, rng),
                bias: 0.0,
                gamma: 1.0,
                beta: 0.0,
            })
            .collect()),
        InitScheme::Clone => {
            let noise = Normal::new(0.0, CLONE_NOISE).expect("positive std");
            lp.top_slots
                .iter()
                .map(|&src| {
                    let mut p = net.neuron_params(lp.layer, src)?;
                    p.incoming.iter_mut().for_each(|w| *w += noise.sample(rng));
                    Ok(p)
                })
                .collect()
        }
    }
}

/// Splits each source's outgoing weights evenly with its clone and mirrors
/// the incoming noise onto the source.
fn split_clones(net: &mut NetworkState, lp: &LayerPlan, added: &[NeuronRef]) -> Result<()> {
    for (&src, new) in lp.top_slots.iter().zip(added) {
        let half: Vec<f64> = net.outgoing(lp.layer, src)?.iter().map(|w| w / 2.0).collect();
        net.set_outgoing(lp.layer, src, &half)?;
        net.set_outgoing(lp.layer, new.slot, &half)?;
        let mut s = net.neuron_params(lp.layer, src)?;
        let c = net.neuron_params(lp.layer, new.slot)?;
        for (a, b) in s.incoming.iter_mut().zip(&c.incoming) {
            *a = 2.0 * *a - *b;
        }
        net.set_neuron_params(lp.layer, src, &s)?;
    }
    Ok(())
}

/// Executes a plan layer by layer: grow, scale, perturb, prune, scale.
/// The optimizer, when given, is edited in lockstep.
pub fn apply_modification<R: Rng + ?Sized>(
    net: &mut NetworkState,
    plan: &ModificationPlan,
    cfg: &PlasticityConfig,
    mut optimizer: Option<&mut Optimizer>,
    rng: &mut R,
) -> Result<EventRecord> {
    let mut layers = Vec::with_capacity(plan.layers.len());
    for lp in &plan.layers {
        let n = net.width(lp.layer);
        let distinct: BTreeSet<usize> = lp.prune_slots.iter().copied().collect();
        if distinct.len() != lp.prune_slots.len() || distinct.iter().any(|&s| s >= n) {
            return Err(Error::Plan(format!("prune slots of layer {} collide or are not live", lp.layer)));
        }
        if lp.add_count != lp.prune_slots.len() {
            return Err(Error::Plan(format!("layer {} plan is not paired", lp.layer)));
        }
        let mut ev = LayerEvent {
            layer: lp.layer,
            width_before: n,
            width_after: n,
            pruned_ids: Vec::new(),
            added_ids: Vec::new(),
            scale_factors: Vec::new(),
            notes: Vec::new(),
        };
        let k = lp.add_count;
        if k == 0 {
            layers.push(ev);
            continue;
        }

        let fresh = new_neurons(net, lp, cfg.init_scheme, rng)?;
        let added = net.append_neurons(lp.layer, &fresh)?;
        if let Some(opt) = optimizer.as_deref_mut() {
            opt.append_neurons(lp.layer, k)?;
        }
        if cfg.init_scheme == InitScheme::Clone {
            split_clones(net, lp, &added)?;
        }
        ev.added_ids = added.iter().map(|a| a.id).collect();
        if cfg.ws {
            let s = weight_scale_factor(n, n + k)?;
            if net.scale_consumer(lp.layer, s)?.is_some() {
                ev.scale_factors.push(s);
            }
        }
        if cfg.gda {
            ev.notes = randomize_norm_params(net, &added, cfg.sigma, rng)?;
        }

        ev.pruned_ids = net.remove_neurons(lp.layer, &lp.prune_slots)?;
        if let Some(opt) = optimizer.as_deref_mut() {
            opt.remove_neurons(lp.layer, &lp.prune_slots)?;
        }
        if cfg.ws {
            let s = weight_scale_factor(n + k, n)?;
            if net.scale_consumer(lp.layer, s)?.is_some() {
                ev.scale_factors.push(s);
            }
        }
        ev.width_after = net.width(lp.layer);
        layers.push(ev);
    }
    let record = EventRecord {
        epoch: plan.epoch,
        criterion: plan.criterion,
        alpha: plan.alpha,
        layers,
    };
    check_event(net, &record, optimizer.as_deref())?;
    Ok(record)
}

/// Post-event invariants: paired widths, disjoint id sets, a valid network
/// and optimizer keys equal to the live ids.
pub fn check_event(net: &NetworkState, record: &EventRecord, optimizer: Option<&Optimizer>) -> Result<()> {
    for ev in &record.layers {
        if ev.width_after != ev.width_before || net.width(ev.layer) != ev.width_before {
            return Err(Error::state(format!(
                "layer {} width changed from {} to {}",
                ev.layer,
                ev.width_before,
                net.width(ev.layer)
            )));
        }
        let pruned: BTreeSet<u64> = ev.pruned_ids.iter().copied().collect();
        if ev.added_ids.iter().any(|id| pruned.contains(id)) {
            return Err(Error::state(format!("layer {} pruned a neuron it just added", ev.layer)));
        }
        let live = net.live_ids();
        if ev.pruned_ids.iter().any(|id| live.contains(id)) || ev.added_ids.iter().any(|id| !live.contains(id)) {
            return Err(Error::state(format!("layer {} id bookkeeping is inconsistent", ev.layer)));
        }
    }
    net.validate()?;
    if let Some(opt) = optimizer {
        if opt.neuron_keys() != net.live_ids() || !opt.matches(net) {
            return Err(Error::state("optimizer state keys differ from live neuron ids"));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scores(net: &NetworkState, f: impl Fn(NeuronRef) -> f64) -> BTreeMap<NeuronRef, f64> {
        net.enumerate_neurons().into_iter().map(|n| (n, f(n))).collect()
    }

    #[test]
    fn counts_and_boundaries() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = NetworkState::build_mlp(4, &[64, 10], 3, &mut rng).unwrap();
        let s = scores(&net, |n| n.slot as f64);
        let plan = plan_modification(&s, &net, 0.3, 9, Criterion::AccumulatedGradient).unwrap();
        assert_eq!(plan.layers[0].add_count, 19);
        assert_eq!(plan.layers[0].prune_slots, (0..19).collect::<Vec<_>>());
        assert_eq!(plan.layers[1].add_count, 3);

        let empty = plan_modification(&s, &net, 0.0, 9, Criterion::Random).unwrap();
        assert!(empty.is_empty());

        let all = plan_modification(&s, &net, 1.0, 9, Criterion::Random).unwrap();
        assert_eq!(all.layers[0].prune_slots.len(), 64);
        assert!(plan_modification(&s, &net, 1.5, 9, Criterion::Random).is_err());
    }

    #[test]
    fn ties_prune_lower_slot_first() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = NetworkState::build_mlp(2, &[5], 2, &mut rng).unwrap();
        let s = scores(&net, |n| if n.slot == 4 { 0.0 } else { 1.0 });
        let plan = plan_modification(&s, &net, 0.4, 0, Criterion::AccumulatedGradient).unwrap();
        assert_eq!(plan.layers[0].prune_slots, vec![4, 0]);
    }

    #[test]
    fn scale_factor_values() {
        assert_eq!(weight_scale_factor(64, 64).unwrap(), 1.0);
        let s = weight_scale_factor(64, 83).unwrap();
        assert_eq!(s, (64.0f64 / 83.0).sqrt());
        assert!((s - 0.8780).abs() < 2e-4);
        let back = weight_scale_factor(83, 64).unwrap();
        for w in [0.37, -1.9, 12.5] {
            assert!((w * s * back - w).abs() < 1e-12);
        }
        assert!(weight_scale_factor(0, 3).is_err());
    }

    #[test]
    fn full_turnover_keeps_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net = NetworkState::build_mlp(3, &[6, 4], 2, &mut rng).unwrap();
        let before = net.live_ids();
        let s = scores(&net, |n| n.id as f64);
        let plan = plan_modification(&s, &net, 1.0, 0, Criterion::AccumulatedGradient).unwrap();
        let rec = apply_modification(&mut net, &plan, &PlasticityConfig::default(), None, &mut rng).unwrap();
        assert_eq!(net.width(0), 6);
        assert!(net.live_ids().is_disjoint(&before));
        assert_eq!(rec.layers[0].scale_factors.len(), 2);
    }

    #[test]
    fn clone_scheme_preserves_function() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut net = NetworkState::build_mlp(3, &[6], 2, &mut rng).unwrap();
        let x = crate::Tensor::new(vec![4, 3], (0..12).map(|i| i as f64 * 0.3 - 1.0).collect()).unwrap();
        let before = net.logits(&x, crate::Mode::Eval).unwrap();
        let s = scores(&net, |n| n.slot as f64);
        let mut plan = plan_modification(&s, &net, 0.5, 0, Criterion::AccumulatedGradient).unwrap();
        plan.layers[0].prune_slots.clear();
        plan.layers[0].add_count = 3;
        let cfg = PlasticityConfig {
            init_scheme: InitScheme::Clone,
            ws: false,
            gda: false,
            ..PlasticityConfig::default()
        };
        let fresh = new_neurons(&net, &plan.layers[0], cfg.init_scheme, &mut rng).unwrap();
        let added = net.append_neurons(0, &fresh).unwrap();
        split_clones(&mut net, &plan.layers[0], &added).unwrap();
        assert_eq!(net.width(0), 9);
        let after = net.logits(&x, crate::Mode::Eval).unwrap();
        let diff = before
            .data()
            .iter()
            .zip(after.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        // symmetric noise cancels only to first order through the relu
        assert!(diff < 0.1, "{diff}");
    }
}
