//! Central finite-difference checks for every differentiable op and for
//! end-to-end losses through small networks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Fault, Graph, Mode, NormConfig, RunningStats, Var};
use crate::error::Result;
use crate::model::NetworkState;
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct OpCheck {
    pub op: String,
    pub max_rel_error: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

/// `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)`, floored so exact zeros compare as equal.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(1e-8)
}

/// Central differences of a scalar function at `x`.
pub fn finite_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Compares backprop against finite differences for the inputs in `wrt`.
pub fn check_graph<F>(op: &str, inputs: &[Tensor], wrt: &[usize], fault: Option<Fault>, build: F) -> Result<OpCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::with_fault(fault);
    let vars: Vec<Var> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let mut t = t.clone();
            t.requires_grad = wrt.contains(&i);
            g.leaf(t)
        })
        .collect();
    let root = build(&mut g, &vars)?;
    g.backward(root)?;

    let mut worst = 0.0f64;
    for &i in wrt {
        let analytic = g
            .grad(vars[i])
            .map_or_else(|| vec![0.0; inputs[i].numel()], <[f64]>::to_vec);
        let mut failure = None;
        let numeric = finite_difference(
            |probe| {
                let mut h = Graph::new();
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| {
                        let data = if j == i { probe.to_vec() } else { t.data().to_vec() };
                        h.leaf(Tensor::new(t.shape().to_vec(), data).expect("same shape"))
                    })
                    .collect();
                match build(&mut h, &vars) {
                    Ok(v) => h.value(v).item(),
                    Err(e) => {
                        failure = Some(e);
                        f64::NAN
                    }
                }
            },
            inputs[i].data(),
            FD_STEP,
        );
        if let Some(e) = failure {
            return Err(e);
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(OpCheck {
        op: op.to_string(),
        max_rel_error: worst,
    })
}

/// End-to-end check of the cross-entropy loss w.r.t. every network parameter.
pub fn check_network(op: &str, net: &NetworkState, x: &Tensor, labels: &[usize], fault: Option<Fault>) -> Result<OpCheck> {
    let loss_of = |net: &mut NetworkState, g: &mut Graph| -> Result<(Var, crate::model::Forward)> {
        let f = net.forward(g, x, Mode::Train)?;
        let l = g.softmax_cross_entropy(f.logits, labels, None)?;
        Ok((l, f))
    };
    let mut work = net.clone();
    let mut g = Graph::with_fault(fault);
    let (loss, fwd) = loss_of(&mut work, &mut g)?;
    g.backward(loss)?;
    work.store_grads(&g, &fwd);

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for li in 0..net.layers().len() {
        for pi in 0..net.layers()[li].params().len() {
            let p = work.layers()[li].params()[pi];
            analytic.extend_from_slice(p.grad.as_deref().expect("grads stored"));
            let base = net.layers()[li].params()[pi].data().to_vec();
            let mut failure = None;
            let fd = finite_difference(
                |probe| {
                    let mut perturbed = net.clone();
                    perturbed.layers_mut()[li].params_mut()[pi]
                        .data_mut()
                        .copy_from_slice(probe);
                    let mut h = Graph::new();
                    match loss_of(&mut perturbed, &mut h) {
                        Ok((l, _)) => h.value(l).item(),
                        Err(e) => {
                            failure = Some(e);
                            f64::NAN
                        }
                    }
                },
                &base,
                FD_STEP,
            );
            if let Some(e) = failure {
                return Err(e);
            }
            numeric.extend(fd);
        }
    }
    Ok(OpCheck {
        op: op.to_string(),
        max_rel_error: relative_error(&analytic, &numeric),
    })
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape")
}

/// Values bounded away from zero so piecewise-linear kinks are not probed.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

fn projection(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Runs every registered check. `fault` injects a deliberate backward bug.
pub fn run_suite(seed: u64, fault: Option<Fault>) -> Result<Vec<OpCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let (a, b) = (uniform(&mut rng, &[3, 4]), uniform(&mut rng, &[4, 2]));
    let r = projection(&mut rng, 6);
    out.push(check_graph("matmul", &[a, b], &[0, 1], fault, |g, v| {
        let y = g.matmul(v[0], v[1])?;
        g.weighted_sum(y, r.clone())
    })?);

    let (x, w, bias) = (
        uniform(&mut rng, &[5, 4]),
        uniform(&mut rng, &[3, 4]),
        uniform(&mut rng, &[3]),
    );
    let r = projection(&mut rng, 15);
    out.push(check_graph("linear", &[x, w, bias], &[0, 1, 2], fault, |g, v| {
        let y = g.linear(v[0], v[1], Some(v[2]))?;
        g.weighted_sum(y, r.clone())
    })?);

    let (a, b) = (uniform(&mut rng, &[2, 3]), uniform(&mut rng, &[2, 3]));
    let r = projection(&mut rng, 6);
    out.push(check_graph("add", &[a, b], &[0, 1], fault, |g, v| {
        let y = g.add(v[0], v[1])?;
        g.weighted_sum(y, r.clone())
    })?);

    let x = away_from_zero(&mut rng, &[3, 5]);
    let r = projection(&mut rng, 15);
    out.push(check_graph("relu", &[x], &[0], fault, |g, v| {
        let y = g.relu(v[0]);
        g.weighted_sum(y, r.clone())
    })?);

    let (x, w, bias) = (
        uniform(&mut rng, &[4, 2, 5, 5]),
        uniform(&mut rng, &[3, 2, 3, 3]),
        uniform(&mut rng, &[3]),
    );
    let r = projection(&mut rng, 4 * 3 * 5 * 5);
    out.push(check_graph("conv2d", &[x, w, bias], &[0, 1, 2], fault, |g, v| {
        let y = g.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
        g.weighted_sum(y, r.clone())
    })?);

    let (x, w) = (uniform(&mut rng, &[2, 2, 6, 6]), uniform(&mut rng, &[2, 2, 3, 3]));
    let r = projection(&mut rng, 2 * 2 * 3 * 3);
    out.push(check_graph("conv2d_strided", &[x, w], &[0, 1], fault, |g, v| {
        let y = g.conv2d(v[0], v[1], None, 2, 1)?;
        g.weighted_sum(y, r.clone())
    })?);

    let (x, gamma, beta) = (
        uniform(&mut rng, &[8, 4, 3, 3]),
        uniform(&mut rng, &[4]),
        uniform(&mut rng, &[4]),
    );
    let r = projection(&mut rng, 8 * 4 * 9);
    out.push(check_graph("batch_norm_train", &[x, gamma, beta], &[0, 1, 2], fault, |g, v| {
        let mut stats = RunningStats::new(4);
        let y = g.batch_norm(v[0], v[1], v[2], &mut stats, NormConfig::default(), Mode::Train)?;
        g.weighted_sum(y, r.clone())
    })?);

    let (x, gamma, beta) = (
        uniform(&mut rng, &[6, 3]),
        uniform(&mut rng, &[3]),
        uniform(&mut rng, &[3]),
    );
    let stats = RunningStats {
        mean: projection(&mut rng, 3),
        var: vec![0.5, 1.5, 2.0],
    };
    let r = projection(&mut rng, 18);
    out.push(check_graph("batch_norm_eval", &[x, gamma, beta], &[0, 1, 2], fault, |g, v| {
        let mut stats = stats.clone();
        let y = g.batch_norm(v[0], v[1], v[2], &mut stats, NormConfig::default(), Mode::Eval)?;
        g.weighted_sum(y, r.clone())
    })?);

    let x = uniform(&mut rng, &[2, 3, 4, 4]);
    let r = projection(&mut rng, 2 * 3 * 2 * 2);
    out.push(check_graph("max_pool2d", &[x], &[0], fault, |g, v| {
        let y = g.max_pool2d(v[0], 2)?;
        g.weighted_sum(y, r.clone())
    })?);

    let x = uniform(&mut rng, &[2, 3, 2, 2]);
    let r = projection(&mut rng, 24);
    out.push(check_graph("flatten", &[x], &[0], fault, |g, v| {
        let y = g.flatten(v[0])?;
        g.weighted_sum(y, r.clone())
    })?);

    let z = uniform(&mut rng, &[5, 4]);
    let labels = [0, 3, 1, 1, 2];
    out.push(check_graph("softmax_cross_entropy", &[z.clone()], &[0], fault, |g, v| {
        g.softmax_cross_entropy(v[0], &labels, None)
    })?);
    let weights = [1.0, 3.0, 0.5, 2.0, 1.0];
    out.push(check_graph("softmax_cross_entropy_weighted", &[z], &[0], fault, |g, v| {
        g.softmax_cross_entropy(v[0], &labels, Some(&weights))
    })?);

    let mlp = NetworkState::build_mlp(4, &[6, 5], 3, &mut rng)?;
    let x = uniform(&mut rng, &[8, 4]);
    let labels: Vec<usize> = (0..8).map(|i| i % 3).collect();
    out.push(check_network("mlp_end_to_end", &mlp, &x, &labels, fault)?);

    let cnn = NetworkState::build_small_cnn([1, 6, 6], &[3], 3, false, &mut rng)?;
    let x = uniform(&mut rng, &[4, 1, 6, 6]);
    let labels = [0, 1, 2, 1];
    out.push(check_network("cnn_end_to_end", &cnn, &x, &labels, fault)?);

    let res = NetworkState::build_small_cnn([2, 4, 4], &[2], 2, true, &mut rng)?;
    let x = uniform(&mut rng, &[3, 2, 4, 4]);
    let labels = [0, 1, 1];
    out.push(check_network("residual_cnn_end_to_end", &res, &x, &labels, fault)?);

    Ok(out)
}
