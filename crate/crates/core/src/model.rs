//! Mutable-width sequential networks.
//!
//! A parametric layer (dense or conv) owns one "neuron" per output row; a norm
//! layer directly after it shares that width and contributes its affine pair to
//! the neuron. The next parametric layer downstream is the neuron's *consumer*:
//! the neuron's outgoing weights are a contiguous block of `group` entries in
//! every consumer row (1 for dense→dense, `kh·kw` for conv→conv, `H·W` for
//! conv→flatten→dense).

use std::collections::BTreeSet;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mode, NormConfig, RunningStats, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    /// `[out, in]`
    pub weight: Tensor,
    pub bias: Tensor,
    pub mutable: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    /// `[out, in, kh, kw]`
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
    pub mutable: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Norm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub stats: RunningStats,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Dense(Dense),
    Conv(Conv),
    Norm(Norm),
    Relu,
    MaxPool { size: usize },
    Flatten,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Dense,
    Conv,
    Norm,
    Activation,
    Pool,
    Flatten,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    /// Neuron/channel count for dense, conv and norm layers; 0 otherwise.
    pub width: usize,
    /// Input width for dense and conv layers.
    #[serde(default)]
    pub fan_in: usize,
    #[serde(default)]
    pub kernel: usize,
    #[serde(default)]
    pub stride: usize,
    #[serde(default)]
    pub padding: usize,
    #[serde(default)]
    pub mutable: bool,
}

/// Skip connection: the activation entering layer `start` is added to the
/// output of layer `end`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Residual {
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NeuronRef {
    pub layer: usize,
    pub slot: usize,
    pub id: u64,
}

/// Parameters owned by a single neuron.
#[derive(Clone, Debug, PartialEq)]
pub struct NeuronParams {
    pub incoming: Vec<f64>,
    pub bias: f64,
    pub gamma: f64,
    pub beta: f64,
}

/// Where a layer's outgoing weights live.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Consumer {
    pub layer: usize,
    /// Entries per producer slot in each consumer row.
    pub group: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkState {
    pub(crate) input_shape: Vec<usize>,
    pub(crate) num_classes: usize,
    pub(crate) layers: Vec<Layer>,
    pub(crate) residuals: Vec<Residual>,
    /// Stable ids per layer; empty for layers that are not mutable.
    pub(crate) ids: Vec<Vec<u64>>,
    pub(crate) next_id: u64,
    pub norm_cfg: NormConfig,
}

/// Parameter leaves registered by one forward pass, per layer.
#[derive(Debug)]
pub struct Forward {
    pub logits: Var,
    params: Vec<Vec<Var>>,
}

fn he_normal<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, n: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    (0..n).map(|_| normal.sample(rng)).collect()
}

impl Layer {
    pub fn spec(&self) -> LayerSpec {
        let blank = LayerSpec {
            kind: LayerKind::Activation,
            width: 0,
            fan_in: 0,
            kernel: 0,
            stride: 0,
            padding: 0,
            mutable: false,
        };
        match self {
            Layer::Dense(d) => LayerSpec {
                kind: LayerKind::Dense,
                width: d.weight.shape()[0],
                fan_in: d.weight.shape()[1],
                mutable: d.mutable,
                ..blank
            },
            Layer::Conv(c) => LayerSpec {
                kind: LayerKind::Conv,
                width: c.weight.shape()[0],
                fan_in: c.weight.shape()[1],
                kernel: c.weight.shape()[2],
                stride: c.stride,
                padding: c.padding,
                mutable: c.mutable,
            },
            Layer::Norm(n) => LayerSpec {
                kind: LayerKind::Norm,
                width: n.gamma.numel(),
                ..blank
            },
            Layer::Relu => blank,
            Layer::MaxPool { size } => LayerSpec {
                kind: LayerKind::Pool,
                kernel: *size,
                stride: *size,
                ..blank
            },
            Layer::Flatten => LayerSpec {
                kind: LayerKind::Flatten,
                ..blank
            },
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Dense(d) => vec![&d.weight, &d.bias],
            Layer::Conv(c) => vec![&c.weight, &c.bias],
            Layer::Norm(n) => vec![&n.gamma, &n.beta],
            _ => vec![],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Dense(d) => vec![&mut d.weight, &mut d.bias],
            Layer::Conv(c) => vec![&mut c.weight, &mut c.bias],
            Layer::Norm(n) => vec![&mut n.gamma, &mut n.beta],
            _ => vec![],
        }
    }

    fn weight(&self) -> Option<&Tensor> {
        match self {
            Layer::Dense(d) => Some(&d.weight),
            Layer::Conv(c) => Some(&c.weight),
            _ => None,
        }
    }

    fn weight_bias_mut(&mut self) -> Option<(&mut Tensor, &mut Tensor)> {
        match self {
            Layer::Dense(d) => Some((&mut d.weight, &mut d.bias)),
            Layer::Conv(c) => Some((&mut c.weight, &mut c.bias)),
            _ => None,
        }
    }

    pub fn is_parametric(&self) -> bool {
        matches!(self, Layer::Dense(_) | Layer::Conv(_))
    }

    pub fn is_mutable(&self) -> bool {
        match self {
            Layer::Dense(d) => d.mutable,
            Layer::Conv(c) => c.mutable,
            _ => false,
        }
    }
}

/// Row length (entries per output neuron) of a weight tensor.
fn row_len(w: &Tensor) -> usize {
    w.shape()[1..].iter().product()
}

/// Removes rows of a row-major tensor.
pub(crate) fn remove_rows(t: &Tensor, rows: &BTreeSet<usize>) -> (Vec<usize>, Vec<f64>) {
    let stride: usize = t.shape()[1..].iter().product();
    let data: Vec<f64> = t
        .data()
        .chunks(stride.max(1))
        .enumerate()
        .filter(|(i, _)| !rows.contains(i))
        .flat_map(|(_, r)| r.iter().copied())
        .collect();
    let mut shape = t.shape().to_vec();
    shape[0] -= rows.len();
    (shape, data)
}

/// Removes `group`-sized blocks `slots` from each row of length `row_len`.
pub(crate) fn remove_groups(data: &[f64], row_len: usize, group: usize, slots: &BTreeSet<usize>) -> Vec<f64> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks(row_len) {
        for (g, block) in row.chunks(group).enumerate() {
            if !slots.contains(&g) {
                out.extend_from_slice(block);
            }
        }
    }
    out
}

/// Appends `count` zero blocks of `group` entries to each row.
pub(crate) fn append_groups(data: &[f64], row_len: usize, group: usize, count: usize) -> Vec<f64> {
    let rows = data.len() / row_len.max(1);
    let mut out = Vec::with_capacity(data.len() + rows * group * count);
    for row in data.chunks(row_len) {
        out.extend_from_slice(row);
        out.extend(std::iter::repeat_n(0.0, group * count));
    }
    out
}

impl NetworkState {
    /// Dense → norm → relu stacks followed by a dense classifier.
    pub fn build_mlp<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: &[usize],
        num_classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if hidden.is_empty() {
            return Err(Error::input("an MLP needs at least one hidden layer"));
        }
        if input_dim == 0 || num_classes == 0 || hidden.contains(&0) {
            return Err(Error::input(format!(
                "all widths must be >= 1 (input {input_dim}, hidden {hidden:?}, classes {num_classes})"
            )));
        }
        let mut layers = Vec::new();
        let mut prev = input_dim;
        for &w in hidden {
            layers.push(Layer::Dense(Dense {
                weight: Tensor::new(vec![w, prev], he_normal(rng, prev, w * prev))?.parameter(),
                bias: Tensor::zeros(&[w]).parameter(),
                mutable: true,
            }));
            layers.push(Layer::Norm(Norm::new(w)));
            layers.push(Layer::Relu);
            prev = w;
        }
        layers.push(Layer::Dense(classifier(rng, prev, num_classes)?));
        NetworkState::assemble(vec![input_dim], num_classes, layers, vec![])
    }

    /// Conv(3×3) → norm → relu → 2×2 max-pool blocks, then flatten → dense.
    ///
    /// With `residual`, each block gains an inner conv pair wrapped by a skip
    /// connection; only the inner conv is mutable since the join widths must
    /// stay equal.
    pub fn build_small_cnn<R: Rng + ?Sized>(
        input_shape: [usize; 3],
        channels: &[usize],
        num_classes: usize,
        residual: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::input("a CNN needs at least one block"));
        }
        if channels.contains(&0) || num_classes == 0 || input_shape.contains(&0) {
            return Err(Error::input("all widths must be >= 1"));
        }
        let [mut c_prev, mut h, mut w] = input_shape;
        let mut layers = Vec::new();
        let mut residuals = Vec::new();
        for &c in channels {
            layers.push(Layer::Conv(conv3x3(rng, c_prev, c, !residual)?));
            layers.push(Layer::Norm(Norm::new(c)));
            layers.push(Layer::Relu);
            if residual {
                let start = layers.len();
                layers.push(Layer::Conv(conv3x3(rng, c, c, true)?));
                layers.push(Layer::Norm(Norm::new(c)));
                layers.push(Layer::Relu);
                layers.push(Layer::Conv(conv3x3(rng, c, c, false)?));
                layers.push(Layer::Norm(Norm::new(c)));
                residuals.push(Residual {
                    start,
                    end: layers.len() - 1,
                });
                layers.push(Layer::Relu);
            }
            if h < 2 || w < 2 {
                return Err(Error::dim(format!(
                    "input {input_shape:?} too small for {} pooling stages",
                    channels.len()
                )));
            }
            layers.push(Layer::MaxPool { size: 2 });
            h /= 2;
            w /= 2;
            c_prev = c;
        }
        layers.push(Layer::Flatten);
        layers.push(Layer::Dense(classifier(rng, c_prev * h * w, num_classes)?));
        NetworkState::assemble(input_shape.to_vec(), num_classes, layers, residuals)
    }

    /// Wraps raw layers, assigning stable ids to mutable layers.
    pub fn assemble(
        input_shape: Vec<usize>,
        num_classes: usize,
        layers: Vec<Layer>,
        residuals: Vec<Residual>,
    ) -> Result<Self> {
        let mut next_id = 0u64;
        let ids = layers
            .iter()
            .map(|l| {
                if l.is_mutable() {
                    let w = l.spec().width as u64;
                    let ids: Vec<u64> = (next_id..next_id + w).collect();
                    next_id += w;
                    ids
                } else {
                    Vec::new()
                }
            })
            .collect();
        let net = NetworkState {
            input_shape,
            num_classes,
            layers,
            residuals,
            ids,
            next_id,
            norm_cfg: NormConfig::default(),
        };
        net.validate()?;
        Ok(net)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn residuals(&self) -> &[Residual] {
        &self.residuals
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }

    pub fn ids(&self, layer: usize) -> &[u64] {
        &self.ids[layer]
    }

    pub fn next_id(&self) -> u64 {
        self.next_id
    }

    pub fn mutable_layers(&self) -> Vec<usize> {
        (0..self.layers.len()).filter(|&i| self.layers[i].is_mutable()).collect()
    }

    pub fn width(&self, layer: usize) -> usize {
        self.layers[layer].spec().width
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().flat_map(|l| l.params()).map(Tensor::numel).sum()
    }

    /// All live neurons in mutable layers, layer-major then slot-minor.
    pub fn enumerate_neurons(&self) -> Vec<NeuronRef> {
        self.ids
            .iter()
            .enumerate()
            .flat_map(|(layer, ids)| {
                ids.iter()
                    .enumerate()
                    .map(move |(slot, &id)| NeuronRef { layer, slot, id })
            })
            .collect()
    }

    pub fn live_ids(&self) -> BTreeSet<u64> {
        self.ids.iter().flatten().copied().collect()
    }

    pub fn resolve(&self, id: u64) -> Option<NeuronRef> {
        self.enumerate_neurons().into_iter().find(|n| n.id == id)
    }

    /// Norm layer directly following `layer`, if any.
    pub fn norm_of(&self, layer: usize) -> Option<usize> {
        match self.layers.get(layer + 1) {
            Some(Layer::Norm(_)) if self.layers[layer].is_parametric() => Some(layer + 1),
            _ => None,
        }
    }

    /// Per-sample output shape of every layer.
    pub fn layer_output_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shape = self.input_shape.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            shape = match layer {
                Layer::Dense(d) => {
                    let fan_in = d.weight.shape()[1];
                    if shape.len() != 1 || shape[0] != fan_in {
                        return Err(Error::dim(format!("layer {i}: dense fan-in {fan_in} fed with {shape:?}")));
                    }
                    vec![d.weight.shape()[0]]
                }
                Layer::Conv(c) => {
                    let s = c.weight.shape();
                    if shape.len() != 3 || shape[0] != s[1] {
                        return Err(Error::dim(format!("layer {i}: conv expects {} channels, fed {shape:?}", s[1])));
                    }
                    let (hp, wp) = (shape[1] + 2 * c.padding, shape[2] + 2 * c.padding);
                    if s[2] > hp || s[3] > wp {
                        return Err(Error::dim(format!("layer {i}: kernel larger than input {shape:?}")));
                    }
                    vec![s[0], (hp - s[2]) / c.stride + 1, (wp - s[3]) / c.stride + 1]
                }
                Layer::Norm(n) => {
                    if shape.first() != Some(&n.gamma.numel())
                        || n.beta.numel() != n.gamma.numel()
                        || n.stats.mean.len() != n.gamma.numel()
                        || n.stats.var.len() != n.gamma.numel()
                    {
                        return Err(Error::dim(format!(
                            "layer {i}: norm width {} fed {shape:?}",
                            n.gamma.numel()
                        )));
                    }
                    shape
                }
                Layer::Relu => shape,
                Layer::MaxPool { size } => {
                    if shape.len() != 3 || shape[1] < *size || shape[2] < *size {
                        return Err(Error::dim(format!("layer {i}: pool {size} does not fit {shape:?}")));
                    }
                    vec![shape[0], shape[1] / size, shape[2] / size]
                }
                Layer::Flatten => vec![shape.iter().product()],
            };
            out.push(shape.clone());
        }
        if shape != [self.num_classes] {
            return Err(Error::dim(format!(
                "network emits {shape:?}, expected [{}]",
                self.num_classes
            )));
        }
        Ok(out)
    }

    /// Checks width consistency, id bookkeeping and residual joins.
    pub fn validate(&self) -> Result<()> {
        let shapes = self.layer_output_shapes()?;
        if self.ids.len() != self.layers.len() {
            return Err(Error::state("id map does not cover every layer"));
        }
        let mut seen = BTreeSet::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let expected = if layer.is_mutable() { layer.spec().width } else { 0 };
            if self.ids[i].len() != expected {
                return Err(Error::state(format!(
                    "layer {i} has {} ids for {expected} mutable slots",
                    self.ids[i].len()
                )));
            }
            for &id in &self.ids[i] {
                if id >= self.next_id || !seen.insert(id) {
                    return Err(Error::state(format!("neuron id {id} is duplicated or unissued")));
                }
            }
            if let Layer::Norm(_) = layer {
                if i == 0 || !self.layers[i - 1].is_parametric() {
                    return Err(Error::state(format!("norm layer {i} does not follow a parametric layer")));
                }
            }
        }
        for r in &self.residuals {
            if r.start > r.end || r.end >= self.layers.len() {
                return Err(Error::state(format!("residual {r:?} out of range")));
            }
            let skip = if r.start == 0 {
                self.input_shape.clone()
            } else {
                shapes[r.start - 1].clone()
            };
            if skip != shapes[r.end] {
                return Err(Error::dim(format!(
                    "residual join {r:?}: skip {skip:?} vs branch {:?}",
                    shapes[r.end]
                )));
            }
            let producers = [
                self.last_parametric_at_or_before(r.start.checked_sub(1)),
                self.last_parametric_at_or_before(Some(r.end)),
            ];
            if producers.into_iter().flatten().any(|p| self.layers[p].is_mutable()) {
                return Err(Error::state(format!("residual join {r:?} touches a mutable layer")));
            }
        }
        Ok(())
    }

    fn last_parametric_at_or_before(&self, idx: Option<usize>) -> Option<usize> {
        let idx = idx?;
        (0..=idx).rev().find(|&i| self.layers[i].is_parametric())
    }

    /// Next parametric layer downstream of `layer` and its per-slot group size.
    pub fn consumer_of(&self, layer: usize) -> Result<Option<Consumer>> {
        let shapes = self.layer_output_shapes()?;
        let mut spatial = 1;
        for i in layer + 1..self.layers.len() {
            match &self.layers[i] {
                Layer::Dense(_) => return Ok(Some(Consumer { layer: i, group: spatial })),
                Layer::Conv(c) => {
                    let s = c.weight.shape();
                    return Ok(Some(Consumer {
                        layer: i,
                        group: s[2] * s[3],
                    }));
                }
                Layer::Flatten => {
                    let before = &shapes[i - 1];
                    spatial = before[1..].iter().product();
                }
                _ => {}
            }
        }
        Ok(None)
    }

    pub fn forward(&mut self, g: &mut Graph, x: &Tensor, mode: Mode) -> Result<Forward> {
        let expected: Vec<usize> = self.input_shape.clone();
        if x.shape().len() != expected.len() + 1 || x.shape()[1..] != expected[..] {
            return Err(Error::dim(format!(
                "batch shape {:?} does not match input {:?}",
                x.shape(),
                expected
            )));
        }
        let mut cur = g.leaf(Tensor::new(x.shape().to_vec(), x.data().to_vec())?);
        let mut params = Vec::with_capacity(self.layers.len());
        let mut saved: Vec<(usize, Var)> = Vec::new();
        let cfg = self.norm_cfg;
        for (i, layer) in self.layers.iter_mut().enumerate() {
            if self.residuals.iter().any(|r| r.start == i) {
                saved.push((i, cur));
            }
            let vars = match layer {
                Layer::Dense(d) => {
                    let (w, b) = (g.param(&d.weight), g.param(&d.bias));
                    cur = g.linear(cur, w, Some(b))?;
                    vec![w, b]
                }
                Layer::Conv(c) => {
                    let (w, b) = (g.param(&c.weight), g.param(&c.bias));
                    cur = g.conv2d(cur, w, Some(b), c.stride, c.padding)?;
                    vec![w, b]
                }
                Layer::Norm(n) => {
                    let (gm, bt) = (g.param(&n.gamma), g.param(&n.beta));
                    cur = g.batch_norm(cur, gm, bt, &mut n.stats, cfg, mode)?;
                    vec![gm, bt]
                }
                Layer::Relu => {
                    cur = g.relu(cur);
                    vec![]
                }
                Layer::MaxPool { size } => {
                    cur = g.max_pool2d(cur, *size)?;
                    vec![]
                }
                Layer::Flatten => {
                    cur = g.flatten(cur)?;
                    vec![]
                }
            };
            params.push(vars);
            for r in self.residuals.iter().filter(|r| r.end == i) {
                let (_, skip) = saved
                    .iter()
                    .find(|(s, _)| *s == r.start)
                    .copied()
                    .ok_or_else(|| Error::state("residual start not reached"))?;
                cur = g.add(cur, skip)?;
            }
        }
        Ok(Forward { logits: cur, params })
    }

    /// Logits for a batch without keeping gradients.
    pub fn logits(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut g = Graph::new();
        let f = self.forward(&mut g, x, mode)?;
        Ok(g.value(f.logits).clone())
    }

    /// Copies parameter gradients from a finished backward pass.
    pub fn store_grads(&mut self, g: &Graph, fwd: &Forward) {
        for (layer, vars) in self.layers.iter_mut().zip(&fwd.params) {
            for (p, v) in layer.params_mut().into_iter().zip(vars) {
                p.grad = Some(g.grad(*v).map_or_else(|| vec![0.0; p.numel()], <[f64]>::to_vec));
            }
        }
    }

    pub fn clear_grads(&mut self) {
        for layer in &mut self.layers {
            for p in layer.params_mut() {
                p.grad = None;
            }
        }
    }

    fn check_mutable(&self, layer: usize) -> Result<()> {
        match self.layers.get(layer) {
            Some(l) if l.is_mutable() => Ok(()),
            _ => Err(Error::Plan(format!("layer {layer} is not a mutable parametric layer"))),
        }
    }

    pub fn neuron_params(&self, layer: usize, slot: usize) -> Result<NeuronParams> {
        self.check_mutable(layer)?;
        let w = self.layers[layer].weight().expect("parametric");
        if slot >= w.shape()[0] {
            return Err(Error::Plan(format!("slot {slot} not live in layer {layer}")));
        }
        let rl = row_len(w);
        let bias = self.layers[layer].params()[1].data()[slot];
        let (gamma, beta) = match self.norm_of(layer).map(|n| &self.layers[n]) {
            Some(Layer::Norm(n)) => (n.gamma.data()[slot], n.beta.data()[slot]),
            _ => (1.0, 0.0),
        };
        Ok(NeuronParams {
            incoming: w.data()[slot * rl..(slot + 1) * rl].to_vec(),
            bias,
            gamma,
            beta,
        })
    }

    pub fn set_neuron_params(&mut self, layer: usize, slot: usize, p: &NeuronParams) -> Result<()> {
        self.check_mutable(layer)?;
        let norm = self.norm_of(layer);
        let (w, b) = self.layers[layer].weight_bias_mut().expect("parametric");
        let rl = row_len(w);
        if p.incoming.len() != rl || slot >= w.shape()[0] {
            return Err(Error::Plan(format!("bad neuron parameters for layer {layer} slot {slot}")));
        }
        w.data_mut()[slot * rl..(slot + 1) * rl].copy_from_slice(&p.incoming);
        b.data_mut()[slot] = p.bias;
        if let Some(Layer::Norm(n)) = norm.map(|i| &mut self.layers[i]) {
            n.gamma.data_mut()[slot] = p.gamma;
            n.beta.data_mut()[slot] = p.beta;
        }
        Ok(())
    }

    /// Outgoing weights of `slot`: one block of `group` entries per consumer row.
    pub fn outgoing(&self, layer: usize, slot: usize) -> Result<Vec<f64>> {
        let Some(c) = self.consumer_of(layer)? else {
            return Ok(Vec::new());
        };
        let w = self.layers[c.layer].weight().expect("parametric");
        let rl = row_len(w);
        Ok(w.data()
            .chunks(rl)
            .flat_map(|row| row[slot * c.group..(slot + 1) * c.group].iter().copied())
            .collect())
    }

    pub fn set_outgoing(&mut self, layer: usize, slot: usize, values: &[f64]) -> Result<()> {
        let Some(c) = self.consumer_of(layer)? else {
            return Ok(());
        };
        let (w, _) = self.layers[c.layer].weight_bias_mut().expect("parametric");
        let rl = row_len(w);
        if values.len() != w.shape()[0] * c.group {
            return Err(Error::Plan("outgoing block length mismatch".into()));
        }
        for (row, block) in w.data_mut().chunks_mut(rl).zip(values.chunks(c.group)) {
            row[slot * c.group..(slot + 1) * c.group].copy_from_slice(block);
        }
        Ok(())
    }

    /// Multiplies the consumer's weights of `layer` by `s`.
    pub fn scale_consumer(&mut self, layer: usize, s: f64) -> Result<Option<usize>> {
        let Some(c) = self.consumer_of(layer)? else {
            return Ok(None);
        };
        let (w, _) = self.layers[c.layer].weight_bias_mut().expect("parametric");
        w.data_mut().iter_mut().for_each(|v| *v *= s);
        Ok(Some(c.layer))
    }

    /// Appends neurons to a mutable layer with zero outgoing weights; returns
    /// their refs (fresh ids).
    pub fn append_neurons(&mut self, layer: usize, neurons: &[NeuronParams]) -> Result<Vec<NeuronRef>> {
        self.check_mutable(layer)?;
        let consumer = self.consumer_of(layer)?;
        let norm = self.norm_of(layer);
        let old_width = self.width(layer);
        let k = neurons.len();
        {
            let (w, b) = self.layers[layer].weight_bias_mut().expect("parametric");
            let rl = row_len(w);
            if neurons.iter().any(|n| n.incoming.len() != rl) {
                return Err(Error::Plan(format!("new neuron fan-in differs from {rl}")));
            }
            let mut wd = w.data().to_vec();
            let mut bd = b.data().to_vec();
            for n in neurons {
                wd.extend_from_slice(&n.incoming);
                bd.push(n.bias);
            }
            let mut shape = w.shape().to_vec();
            shape[0] += k;
            w.replace(shape, wd);
            b.replace(vec![old_width + k], bd);
        }
        if let Some(Layer::Norm(nl)) = norm.map(|i| &mut self.layers[i]) {
            let mut gd = nl.gamma.data().to_vec();
            let mut bd = nl.beta.data().to_vec();
            for n in neurons {
                gd.push(n.gamma);
                bd.push(n.beta);
                nl.stats.mean.push(0.0);
                nl.stats.var.push(1.0);
            }
            nl.gamma.replace(vec![old_width + k], gd);
            nl.beta.replace(vec![old_width + k], bd);
        }
        if let Some(c) = consumer {
            let (w, _) = self.layers[c.layer].weight_bias_mut().expect("parametric");
            let rl = row_len(w);
            let data = append_groups(w.data(), rl, c.group, k);
            let mut shape = w.shape().to_vec();
            shape[1] += k * if shape.len() == 2 { c.group } else { 1 };
            w.replace(shape, data);
        }
        let first = self.next_id;
        self.next_id += k as u64;
        self.ids[layer].extend(first..self.next_id);
        Ok((0..k)
            .map(|j| NeuronRef {
                layer,
                slot: old_width + j,
                id: first + j as u64,
            })
            .collect())
    }

    /// Deletes neurons (rows, norm entries and consumer fan-in blocks); returns
    /// the removed ids in slot order.
    pub fn remove_neurons(&mut self, layer: usize, slots: &[usize]) -> Result<Vec<u64>> {
        self.check_mutable(layer)?;
        let width = self.width(layer);
        let set: BTreeSet<usize> = slots.iter().copied().collect();
        if set.len() != slots.len() {
            return Err(Error::Plan(format!("duplicate prune slots in layer {layer}")));
        }
        if let Some(&bad) = set.iter().find(|&&s| s >= width) {
            return Err(Error::Plan(format!("slot {bad} is not live in layer {layer} (width {width})")));
        }
        if set.len() == width {
            return Err(Error::Plan(format!("removing every neuron of layer {layer}")));
        }
        let consumer = self.consumer_of(layer)?;
        let norm = self.norm_of(layer);
        {
            let (w, b) = self.layers[layer].weight_bias_mut().expect("parametric");
            let (ws, wd) = remove_rows(w, &set);
            w.replace(ws, wd);
            let (bs, bd) = remove_rows(b, &set);
            b.replace(bs, bd);
        }
        if let Some(Layer::Norm(nl)) = norm.map(|i| &mut self.layers[i]) {
            let (s, d) = remove_rows(&nl.gamma, &set);
            nl.gamma.replace(s, d);
            let (s, d) = remove_rows(&nl.beta, &set);
            nl.beta.replace(s, d);
            nl.stats.mean = keep(&nl.stats.mean, &set);
            nl.stats.var = keep(&nl.stats.var, &set);
        }
        if let Some(c) = consumer {
            let (w, _) = self.layers[c.layer].weight_bias_mut().expect("parametric");
            let rl = row_len(w);
            let data = remove_groups(w.data(), rl, c.group, &set);
            let mut shape = w.shape().to_vec();
            shape[1] -= set.len() * if shape.len() == 2 { c.group } else { 1 };
            w.replace(shape, data);
        }
        let removed: Vec<u64> = set.iter().map(|&s| self.ids[layer][s]).collect();
        self.ids[layer] = keep(&self.ids[layer], &set);
        Ok(removed)
    }
}

fn keep<T: Copy>(v: &[T], drop: &BTreeSet<usize>) -> Vec<T> {
    v.iter()
        .enumerate()
        .filter(|(i, _)| !drop.contains(i))
        .map(|(_, x)| *x)
        .collect()
}

impl Norm {
    pub fn new(width: usize) -> Self {
        Norm {
            gamma: Tensor::full(&[width], 1.0).parameter(),
            beta: Tensor::zeros(&[width]).parameter(),
            stats: RunningStats::new(width),
        }
    }
}

fn classifier<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, num_classes: usize) -> Result<Dense> {
    let normal = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).expect("positive std");
    let data = (0..fan_in * num_classes).map(|_| normal.sample(rng)).collect();
    Ok(Dense {
        weight: Tensor::new(vec![num_classes, fan_in], data)?.parameter(),
        bias: Tensor::zeros(&[num_classes]).parameter(),
        mutable: false,
    })
}

fn conv3x3<R: Rng + ?Sized>(rng: &mut R, c_in: usize, c_out: usize, mutable: bool) -> Result<Conv> {
    let fan_in = c_in * 9;
    Ok(Conv {
        weight: Tensor::new(vec![c_out, c_in, 3, 3], he_normal(rng, fan_in, c_out * fan_in))?.parameter(),
        bias: Tensor::zeros(&[c_out]).parameter(),
        stride: 1,
        padding: 1,
        mutable,
    })
}

/// He-normal incoming weights for a fresh neuron of `layer`.
pub(crate) fn he_row<R: Rng + ?Sized>(net: &NetworkState, layer: usize, rng: &mut R) -> Vec<f64> {
    let w = net.layers[layer].weight().expect("parametric");
    let rl = row_len(w);
    he_normal(rng, rl, rl)
}
