//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every op appends a node to a [`Graph`]; inputs always precede outputs, so
//! walking the tape backwards is a reverse topological order and each node is
//! visited exactly once. Gradients reaching a node along several paths are
//! summed.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Deliberate backward faults, used to prove the gradient checker can fail.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    ConvWeightSignFlip,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormConfig {
    pub eps: f64,
    pub momentum: f64,
}

impl Default for NormConfig {
    fn default() -> Self {
        NormConfig {
            eps: 1e-5,
            momentum: 0.1,
        }
    }
}

/// Per-channel running statistics used in eval mode.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        batch: usize,
        fan_in: usize,
        fan_out: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Relu {
        x: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        channels: usize,
        inner: usize,
        batch: usize,
        training: bool,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Reshape {
        x: Var,
    },
    WeightedSum {
        x: Var,
        coeffs: Vec<f64>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        weights: Option<Vec<f64>>,
        probs: Vec<f64>,
        norm: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    fault: Option<Fault>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    #[doc(hidden)]
    pub fn with_fault(fault: Option<Fault>) -> Self {
        Graph {
            nodes: Vec::new(),
            fault,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Adds an input; its `requires_grad` flag decides whether a gradient is kept.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad;
        let mut value = t;
        value.grad = None;
        self.push(value, Op::Leaf, rg)
    }

    /// Adds a copy of `t` as a gradient-tracking leaf.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let value = Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid tensor");
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(format!("matmul of {sa:?} and {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, m, k, n }, rg))
    }

    /// `x[N×in] · w[out×in]ᵀ + b[out]`; rows of `w` are output neurons.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.value(x).shape(), self.value(w).shape());
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(Error::dim(format!("linear input {sx:?} against weight {sw:?}")));
        }
        let (batch, fan_in, fan_out) = (sx[0], sx[1], sw[0]);
        if let Some(b) = b {
            if self.value(b).numel() != fan_out {
                return Err(Error::dim("linear bias length differs from output width"));
            }
        }
        let mut out = kernels::matmul_nt(self.value(x).data(), self.value(w).data(), batch, fan_in, fan_out);
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(fan_out) {
                for (o, bv) in row.iter_mut().zip(bias) {
                    *o += bv;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let value = Tensor::new(vec![batch, fan_out], out)?;
        Ok(self.push(
            value,
            Op::Linear {
                x,
                w,
                b,
                batch,
                fan_in,
                fan_out,
            },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim(format!("add of {:?} and {:?}", ta.shape(), tb.shape())));
        }
        let out: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = t.data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::Relu { x }, rg)
    }

    /// Cross-correlation of `x[N,C,H,W]` with `w[O,C,kh,kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (sx, sw) = (self.value(x).shape(), self.value(w).shape());
        if sx.len() != 4 || sw.len() != 4 {
            return Err(Error::dim(format!("conv2d expects 4-d input and kernel, got {sx:?} and {sw:?}")));
        }
        if sx[1] != sw[1] {
            return Err(Error::dim(format!("conv2d channel mismatch: input {} vs kernel {}", sx[1], sw[1])));
        }
        if stride == 0 {
            return Err(Error::input("conv2d stride must be positive"));
        }
        let (hp, wp) = (sx[2] + 2 * padding, sx[3] + 2 * padding);
        if sw[2] > hp || sw[3] > wp {
            return Err(Error::dim(format!("kernel {}x{} larger than padded input {hp}x{wp}", sw[2], sw[3])));
        }
        let geom = ConvGeom {
            batch: sx[0],
            c_in: sx[1],
            h: sx[2],
            w: sx[3],
            c_out: sw[0],
            kh: sw[2],
            kw: sw[3],
            stride,
            pad: padding,
            oh: (hp - sw[2]) / stride + 1,
            ow: (wp - sw[3]) / stride + 1,
        };
        if let Some(b) = b {
            if self.value(b).numel() != geom.c_out {
                return Err(Error::dim("conv2d bias length differs from output channels"));
            }
        }
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let value = Tensor::new(vec![geom.batch, geom.c_out, geom.oh, geom.ow], out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, rg))
    }

    /// Batch normalization over axis 1 of a `[N, C, ...]` tensor.
    ///
    /// In train mode the batch statistics are used and `stats` is updated with
    /// `cfg.momentum`; in eval mode `stats` is used as-is.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats,
        cfg: NormConfig,
        mode: Mode,
    ) -> Result<Var> {
        let sx = self.value(x).shape().to_vec();
        if sx.len() < 2 {
            return Err(Error::dim(format!("batch_norm expects [N, C, ...], got {sx:?}")));
        }
        let (batch, channels) = (sx[0], sx[1]);
        let inner: usize = sx[2..].iter().product();
        if self.value(gamma).numel() != channels || self.value(beta).numel() != channels {
            return Err(Error::dim(format!(
                "batch_norm affine length {} / {} differs from {channels} channels",
                self.value(gamma).numel(),
                self.value(beta).numel()
            )));
        }
        if stats.mean.len() != channels || stats.var.len() != channels {
            return Err(Error::dim("running statistics length differs from channel count"));
        }
        let count = (batch * inner) as f64;
        let xd = self.value(x).data();
        let mut xhat = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; channels];
        for c in 0..channels {
            let (mean, istd) = match mode {
                Mode::Train => {
                    let mut sum = 0.0;
                    for n in 0..batch {
                        let off = (n * channels + c) * inner;
                        sum += xd[off..off + inner].iter().sum::<f64>();
                    }
                    let mean = sum / count;
                    let mut sq = 0.0;
                    for n in 0..batch {
                        let off = (n * channels + c) * inner;
                        sq += xd[off..off + inner].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
                    }
                    let var = sq / count;
                    let unbiased = if count > 1.0 { sq / (count - 1.0) } else { var };
                    stats.mean[c] = (1.0 - cfg.momentum) * stats.mean[c] + cfg.momentum * mean;
                    stats.var[c] = (1.0 - cfg.momentum) * stats.var[c] + cfg.momentum * unbiased;
                    (mean, 1.0 / (var + cfg.eps).sqrt())
                }
                Mode::Eval => (stats.mean[c], 1.0 / (stats.var[c] + cfg.eps).sqrt()),
            };
            inv_std[c] = istd;
            for n in 0..batch {
                let off = (n * channels + c) * inner;
                for i in off..off + inner {
                    xhat[i] = (xd[i] - mean) * istd;
                }
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![0.0; xhat.len()];
        for n in 0..batch {
            for c in 0..channels {
                let off = (n * channels + c) * inner;
                for i in off..off + inner {
                    out[i] = g[c] * xhat[i] + b[c];
                }
            }
        }
        let value = Tensor::new(sx, out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                channels,
                inner,
                batch,
                training: mode == Mode::Train,
            },
            rg,
        ))
    }

    /// Non-overlapping `size×size` max pooling on `[N, C, H, W]`.
    pub fn max_pool2d(&mut self, x: Var, size: usize) -> Result<Var> {
        let sx = self.value(x).shape().to_vec();
        if sx.len() != 4 {
            return Err(Error::dim(format!("max_pool2d expects 4-d input, got {sx:?}")));
        }
        if size == 0 || sx[2] < size || sx[3] < size {
            return Err(Error::dim(format!("pool size {size} does not fit {sx:?}")));
        }
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (oh, ow) = (h / size, w / size);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * size * w + ox * size;
                    for dy in 0..size {
                        for dx in 0..size {
                            let idx = base + (oy * size + dy) * w + ox * size + dx;
                            if xd[idx] > xd[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::MaxPool { x, argmax }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let value = Tensor::new(t.shape().to_vec(), t.data().to_vec())?.reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    /// `[N, ...] → [N, prod(...)]`
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape();
        let n = *s.first().ok_or_else(|| Error::dim("flatten of a scalar"))?;
        let rest: usize = s[1..].iter().product();
        self.reshape(x, &[n, rest])
    }

    /// Scalar `Σ xᵢ·cᵢ`.
    pub fn weighted_sum(&mut self, x: Var, coeffs: Vec<f64>) -> Result<Var> {
        let t = self.value(x);
        if coeffs.len() != t.numel() {
            return Err(Error::dim("weighted_sum coefficient length differs from input"));
        }
        let s = t.data().iter().zip(&coeffs).map(|(a, b)| a * b).sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, coeffs }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        self.weighted_sum(x, vec![1.0; n]).expect("length matches")
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    ///
    /// With `weights`, the loss is `Σ wᵢ·ℓᵢ / Σ wᵢ`, which equals the
    /// unweighted mean over a dataset where sample `i` appears `wᵢ` times.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize], weights: Option<&[f64]>) -> Result<Var> {
        let s = self.value(logits).shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::dim(format!("logits {s:?} against {} labels", labels.len())));
        }
        let (n, k) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::input(format!("label {bad} out of range for {k} classes")));
        }
        if let Some(w) = weights {
            if w.len() != n {
                return Err(Error::dim("sample weight length differs from batch"));
            }
            if w.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
                return Err(Error::input("sample weights must be finite and nonnegative"));
            }
        }
        let norm = match weights {
            Some(w) => w.iter().sum(),
            None => n as f64,
        };
        if !(norm > 0.0) {
            return Err(Error::input("sample weights sum to zero"));
        }
        let data = self.value(logits).data();
        let mut probs = vec![0.0; n * k];
        let mut total = 0.0;
        for i in 0..n {
            let row = &data[i * k..(i + 1) * k];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs[i * k + j] = e;
                z += e;
            }
            for p in &mut probs[i * k..(i + 1) * k] {
                *p /= z;
            }
            let nll = -(row[labels[i]] - max - z.ln());
            total += weights.map_or(1.0, |w| w[i]) * nll;
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(total / norm),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                weights: weights.map(<[f64]>::to_vec),
                probs,
                norm,
            },
            rg,
        ))
    }

    /// Propagates gradients from the scalar `root` to every tracking node.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::dim("backward root must be a scalar"));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.rg(root) {
            return Ok(());
        }
        self.nodes[root.0].grad = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let Some(dy) = node.grad.as_deref() else {
                continue;
            };
            propagate(before, node, dy, self.fault);
        }
        Ok(())
    }
}

/// Adds `delta` into the gradient of `v` if it tracks one.
fn accumulate(nodes: &mut [Node], v: Var, delta: impl FnOnce(&mut [f64])) {
    let node = &mut nodes[v.0];
    if !node.requires_grad {
        return;
    }
    let len = node.value.numel();
    let g = node.grad.get_or_insert_with(|| vec![0.0; len]);
    delta(g);
}

fn wants(nodes: &[Node], v: Var) -> bool {
    nodes[v.0].requires_grad
}

fn propagate(nodes: &mut [Node], node: &Node, dy: &[f64], fault: Option<Fault>) {
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            if wants(nodes, *a) {
                // da = dy · bᵀ
                let bv = nodes[b.0].value.data().to_vec();
                let da = kernels::matmul_nt(dy, &bv, m, n, k);
                accumulate(nodes, *a, |g| add_into(g, &da));
            }
            if wants(nodes, *b) {
                // db = aᵀ · dy
                let av = nodes[a.0].value.data().to_vec();
                accumulate(nodes, *b, |g| kernels::matmul_tn_acc(g, &av, dy, m, k, n));
            }
        }
        Op::Linear {
            x,
            w,
            b,
            batch,
            fan_in,
            fan_out,
        } => {
            let (batch, fan_in, fan_out) = (*batch, *fan_in, *fan_out);
            if wants(nodes, *x) {
                let wv = nodes[w.0].value.data().to_vec();
                let dx = kernels::matmul(dy, &wv, batch, fan_out, fan_in);
                accumulate(nodes, *x, |g| add_into(g, &dx));
            }
            if wants(nodes, *w) {
                let xv = nodes[x.0].value.data().to_vec();
                accumulate(nodes, *w, |g| kernels::matmul_tn_acc(g, dy, &xv, batch, fan_out, fan_in));
            }
            if let Some(b) = b {
                accumulate(nodes, *b, |g| {
                    for row in dy.chunks(fan_out) {
                        add_into(g, row);
                    }
                });
            }
        }
        Op::Add { a, b } => {
            accumulate(nodes, *a, |g| add_into(g, dy));
            accumulate(nodes, *b, |g| add_into(g, dy));
        }
        Op::Relu { x } => {
            let mask: Vec<f64> = nodes[x.0]
                .value
                .data()
                .iter()
                .zip(dy)
                .map(|(&v, &d)| if v > 0.0 { d } else { 0.0 })
                .collect();
            accumulate(nodes, *x, |g| add_into(g, &mask));
        }
        Op::Conv2d { x, w, b, geom } => {
            let xv = nodes[x.0].value.data().to_vec();
            let wv = nodes[w.0].value.data().to_vec();
            let mut dx = wants(nodes, *x).then(|| vec![0.0; xv.len()]);
            let mut dw = wants(nodes, *w).then(|| vec![0.0; wv.len()]);
            let mut db = b.filter(|b| wants(nodes, *b)).map(|_| vec![0.0; geom.c_out]);
            kernels::conv2d_backward(
                &xv,
                &wv,
                dy,
                geom,
                dx.as_deref_mut(),
                dw.as_deref_mut(),
                db.as_deref_mut(),
            );
            if let Some(dx) = dx {
                accumulate(nodes, *x, |g| add_into(g, &dx));
            }
            if let Some(mut dw) = dw {
                if fault == Some(Fault::ConvWeightSignFlip) {
                    dw.iter_mut().for_each(|v| *v = -*v);
                }
                accumulate(nodes, *w, |g| add_into(g, &dw));
            }
            if let (Some(db), Some(b)) = (db, b) {
                accumulate(nodes, *b, |g| add_into(g, &db));
            }
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            channels,
            inner,
            batch,
            training,
        } => {
            let (channels, inner, batch) = (*channels, *inner, *batch);
            let count = (batch * inner) as f64;
            let gv = nodes[gamma.0].value.data().to_vec();
            let mut dgamma = vec![0.0; channels];
            let mut dbeta = vec![0.0; channels];
            for n in 0..batch {
                for c in 0..channels {
                    let off = (n * channels + c) * inner;
                    for i in off..off + inner {
                        dgamma[c] += dy[i] * xhat[i];
                        dbeta[c] += dy[i];
                    }
                }
            }
            if wants(nodes, *x) {
                let mut dx = vec![0.0; dy.len()];
                for c in 0..channels {
                    let scale = gv[c] * inv_std[c];
                    for n in 0..batch {
                        let off = (n * channels + c) * inner;
                        for i in off..off + inner {
                            dx[i] = if *training {
                                scale * (dy[i] - dbeta[c] / count - xhat[i] * dgamma[c] / count)
                            } else {
                                scale * dy[i]
                            };
                        }
                    }
                }
                accumulate(nodes, *x, |g| add_into(g, &dx));
            }
            accumulate(nodes, *gamma, |g| add_into(g, &dgamma));
            accumulate(nodes, *beta, |g| add_into(g, &dbeta));
        }
        Op::MaxPool { x, argmax } => {
            accumulate(nodes, *x, |g| {
                for (&src, &d) in argmax.iter().zip(dy) {
                    g[src] += d;
                }
            });
        }
        Op::Reshape { x } => accumulate(nodes, *x, |g| add_into(g, dy)),
        Op::WeightedSum { x, coeffs } => {
            let up = dy[0];
            accumulate(nodes, *x, |g| {
                for (gi, c) in g.iter_mut().zip(coeffs) {
                    *gi += up * c;
                }
            });
        }
        Op::SoftmaxCrossEntropy {
            logits,
            labels,
            weights,
            probs,
            norm,
        } => {
            let up = dy[0];
            let n = labels.len();
            let k = probs.len() / n.max(1);
            accumulate(nodes, *logits, |g| {
                for i in 0..n {
                    let scale = up * weights.as_ref().map_or(1.0, |w| w[i]) / norm;
                    for j in 0..k {
                        let onehot = if j == labels[i] { 1.0 } else { 0.0 };
                        g[i * k + j] += scale * (probs[i * k + j] - onehot);
                    }
                }
            });
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
