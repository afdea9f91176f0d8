//! Raw loops behind the differentiable ops. Reduction order is fixed so that
//! results are bitwise reproducible.

/// `c[m×n] = a[m×k] · b[k×n]`
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cj, bj) in c_row.iter_mut().zip(b_row) {
                *cj += aip * bj;
            }
        }
    }
    c
}

/// `c[m×n] = a[m×k] · b[n×k]ᵀ`
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            c[i * n + j] = dot(a_row, b_row);
        }
    }
    c
}

/// `c[k×n] += a[m×k]ᵀ · b[m×n]`
pub(crate) fn matmul_tn_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let c_row = &mut c[p * n..(p + 1) * n];
            for (cj, bj) in c_row.iter_mut().zip(b_row) {
                *cj += aip * bj;
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four independent partial sums; the combination order is fixed.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// Input coordinate for output position `o` and kernel tap `k`, if inside the image.
    #[inline]
    fn src(o: usize, k: usize, stride: usize, pad: usize, limit: usize) -> Option<usize> {
        let pos = (o * stride + k) as isize - pad as isize;
        (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
    }
}

pub(crate) fn conv2d_forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    let plane = g.oh * g.ow;
    let mut out = vec![0.0; g.batch * g.c_out * plane];
    for n in 0..g.batch {
        for o in 0..g.c_out {
            let dst = &mut out[(n * g.c_out + o) * plane..(n * g.c_out + o + 1) * plane];
            if let Some(b) = bias {
                dst.fill(b[o]);
            }
            for c in 0..g.c_in {
                let src = &x[(n * g.c_in + c) * g.h * g.w..(n * g.c_in + c + 1) * g.h * g.w];
                for ki in 0..g.kh {
                    for kj in 0..g.kw {
                        let wv = w[((o * g.c_in + c) * g.kh + ki) * g.kw + kj];
                        for oy in 0..g.oh {
                            let Some(iy) = ConvGeom::src(oy, ki, g.stride, g.pad, g.h) else {
                                continue;
                            };
                            for ox in 0..g.ow {
                                if let Some(ix) = ConvGeom::src(ox, kj, g.stride, g.pad, g.w) {
                                    dst[oy * g.ow + ox] += wv * src[iy * g.w + ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates input, weight and bias gradients for a convolution.
pub(crate) fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    g: &ConvGeom,
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    let plane = g.oh * g.ow;
    for n in 0..g.batch {
        for o in 0..g.c_out {
            let grad = &dy[(n * g.c_out + o) * plane..(n * g.c_out + o + 1) * plane];
            for c in 0..g.c_in {
                let base = (n * g.c_in + c) * g.h * g.w;
                for ki in 0..g.kh {
                    for kj in 0..g.kw {
                        let widx = ((o * g.c_in + c) * g.kh + ki) * g.kw + kj;
                        let wv = w[widx];
                        let mut wacc = 0.0;
                        for oy in 0..g.oh {
                            let Some(iy) = ConvGeom::src(oy, ki, g.stride, g.pad, g.h) else {
                                continue;
                            };
                            for ox in 0..g.ow {
                                if let Some(ix) = ConvGeom::src(ox, kj, g.stride, g.pad, g.w) {
                                    let gv = grad[oy * g.ow + ox];
                                    let xi = base + iy * g.w + ix;
                                    wacc += gv * x[xi];
                                    if let Some(dx) = dx.as_deref_mut() {
                                        dx[xi] += gv * wv;
                                    }
                                }
                            }
                        }
                        if let Some(dw) = dw.as_deref_mut() {
                            dw[widx] += wacc;
                        }
                    }
                }
            }
        }
    }
    if let Some(db) = db {
        for n in 0..g.batch {
            for o in 0..g.c_out {
                let grad = &dy[(n * g.c_out + o) * plane..(n * g.c_out + o + 1) * plane];
                db[o] += grad.iter().sum::<f64>();
            }
        }
    }
}
