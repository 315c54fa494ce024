//! Forward and backward kernels. Activations are `N × C × H × W`.

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }
}

/// Unfolds one sample into a `(cin·k·k) × (ho·wo)` patch matrix.
fn im2col<S: Scalar>(x: &[S], g: &ConvGeom, cols: &mut [S]) {
    let ncols = g.cols();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(S::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize { S::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Folds a patch-matrix gradient back onto one sample, accumulating.
fn col2im<S: Scalar>(cols: &[S], g: &ConvGeom, dx: &mut [S]) {
    let ncols = g.cols();
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            plane[iy as usize * g.w + ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_forward<S: Scalar>(x: &[S], n: usize, g: &ConvGeom, w: &[S], b: Option<&[S]>) -> Vec<S> {
    let (rows, ncols) = (g.rows(), g.cols());
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * ncols;
    let mut out = vec![S::zero(); n * out_len];
    let mut cols = vec![S::zero(); rows * ncols];
    for s in 0..n {
        im2col(&x[s * in_len..(s + 1) * in_len], g, &mut cols);
        let y = &mut out[s * out_len..(s + 1) * out_len];
        S::gemm(g.cout, rows, ncols, S::one(), w, rows, 1, &cols, ncols, 1, S::zero(), y, ncols, 1);
        if let Some(b) = b {
            for (o, bias) in b.iter().enumerate() {
                for v in &mut y[o * ncols..(o + 1) * ncols] {
                    *v += *bias;
                }
            }
        }
    }
    out
}

/// Returns `(dx, dw, db)`; `db` is empty when the layer has no bias.
pub(crate) fn conv_backward<S: Scalar>(
    x: &[S],
    n: usize,
    g: &ConvGeom,
    w: &[S],
    dy: &[S],
    has_bias: bool,
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let (rows, ncols) = (g.rows(), g.cols());
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * ncols;
    let mut dx = vec![S::zero(); n * in_len];
    let mut dw = vec![S::zero(); g.cout * rows];
    let mut db = if has_bias { vec![S::zero(); g.cout] } else { Vec::new() };
    let mut cols = vec![S::zero(); rows * ncols];
    let mut dcols = vec![S::zero(); rows * ncols];
    for s in 0..n {
        let dys = &dy[s * out_len..(s + 1) * out_len];
        im2col(&x[s * in_len..(s + 1) * in_len], g, &mut cols);
        // dW += dY · colsᵀ
        S::gemm(g.cout, ncols, rows, S::one(), dys, ncols, 1, &cols, 1, ncols, S::one(), &mut dw, rows, 1);
        // dcols = Wᵀ · dY
        S::gemm(rows, g.cout, ncols, S::one(), w, 1, rows, dys, ncols, 1, S::zero(), &mut dcols, ncols, 1);
        col2im(&dcols, g, &mut dx[s * in_len..(s + 1) * in_len]);
        if has_bias {
            for (o, d) in db.iter_mut().enumerate() {
                *d += dys[o * ncols..(o + 1) * ncols].iter().copied().sum::<S>();
            }
        }
    }
    (dx, dw, db)
}

/// Per-channel statistics of a batch, in f64.
pub(crate) struct BnBatch {
    pub mean: Vec<f64>,
    /// Biased variance.
    pub var: Vec<f64>,
    /// Elements per channel.
    pub count: usize,
}

/// Mean is taken as the first sample plus the mean deviation from it, so a
/// constant channel normalizes to exactly zero.
pub(crate) fn bn_batch_stats<S: Scalar>(x: &[S], n: usize, c: usize, hw: usize) -> BnBatch {
    let count = n * hw;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let first = x[ch * hw].as_f64();
        let mut dev = 0.0;
        for s in 0..n {
            let base = (s * c + ch) * hw;
            dev += x[base..base + hw].iter().map(|v| v.as_f64() - first).sum::<f64>();
        }
        let m = first + dev / count as f64;
        let mut sq = 0.0;
        for s in 0..n {
            let base = (s * c + ch) * hw;
            sq += x[base..base + hw].iter().map(|v| (v.as_f64() - m).powi(2)).sum::<f64>();
        }
        mean[ch] = m;
        var[ch] = sq / count as f64;
    }
    BnBatch { mean, var, count }
}

/// `y = gamma · (x − mean) / sqrt(var + eps) + beta`; also returns `x̂`.
pub(crate) fn bn_apply<S: Scalar>(
    x: &[S],
    n: usize,
    c: usize,
    hw: usize,
    mean: &[f64],
    var: &[f64],
    gamma: &[S],
    beta: &[S],
    eps: f64,
    keep_xhat: bool,
) -> (Vec<S>, Vec<S>) {
    let mut y = vec![S::zero(); x.len()];
    let mut xhat = if keep_xhat { vec![S::zero(); x.len()] } else { Vec::new() };
    for ch in 0..c {
        let inv = 1.0 / (var[ch] + eps).sqrt();
        let (g, b) = (gamma[ch].as_f64(), beta[ch].as_f64());
        for s in 0..n {
            let base = (s * c + ch) * hw;
            for i in base..base + hw {
                let xh = (x[i].as_f64() - mean[ch]) * inv;
                if keep_xhat {
                    xhat[i] = S::of(xh);
                }
                y[i] = S::of(g * xh + b);
            }
        }
    }
    (y, xhat)
}

/// Batch-statistics backward. Returns `(dx, dgamma, dbeta)`.
pub(crate) fn bn_backward<S: Scalar>(
    dy: &[S],
    xhat: &[S],
    n: usize,
    c: usize,
    hw: usize,
    var: &[f64],
    gamma: &[S],
    eps: f64,
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let m = (n * hw) as f64;
    let mut dx = vec![S::zero(); dy.len()];
    let mut dgamma = vec![S::zero(); c];
    let mut dbeta = vec![S::zero(); c];
    for ch in 0..c {
        let (mut sdy, mut sdyx) = (0.0, 0.0);
        for s in 0..n {
            let base = (s * c + ch) * hw;
            for i in base..base + hw {
                let d = dy[i].as_f64();
                sdy += d;
                sdyx += d * xhat[i].as_f64();
            }
        }
        dgamma[ch] = S::of(sdyx);
        dbeta[ch] = S::of(sdy);
        let g = gamma[ch].as_f64();
        let inv = 1.0 / (var[ch] + eps).sqrt();
        let k = g * inv / m;
        for s in 0..n {
            let base = (s * c + ch) * hw;
            for i in base..base + hw {
                dx[i] = S::of(k * (m * dy[i].as_f64() - sdy - xhat[i].as_f64() * sdyx));
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Max pooling with padded cells ignored. Returns the output and the flat
/// input index of each maximum (first one on ties).
pub(crate) fn maxpool_forward<S: Scalar>(
    x: &[S],
    n: usize,
    c: usize,
    (h, w): (usize, usize),
    (k, stride, pad): (usize, usize, usize),
    (ho, wo): (usize, usize),
) -> (Vec<S>, Vec<u32>) {
    let mut y = vec![S::zero(); n * c * ho * wo];
    let mut arg = vec![0u32; y.len()];
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = S::neg_infinity();
                let mut best_i = 0;
                for ki in 0..k {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kj in 0..k {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let i = base + iy as usize * w + ix as usize;
                        if x[i] > best {
                            best = x[i];
                            best_i = i;
                        }
                    }
                }
                let o = (plane * ho + oy) * wo + ox;
                y[o] = best;
                arg[o] = best_i as u32;
            }
        }
    }
    (y, arg)
}

pub(crate) fn maxpool_backward<S: Scalar>(dy: &[S], arg: &[u32], in_len: usize) -> Vec<S> {
    let mut dx = vec![S::zero(); in_len];
    for (d, &i) in dy.iter().zip(arg) {
        dx[i as usize] += *d;
    }
    dx
}

pub(crate) fn gap_forward<S: Scalar>(x: &[S], nc: usize, hw: usize) -> Vec<S> {
    let inv = S::of(1.0 / hw as f64);
    (0..nc).map(|p| x[p * hw..(p + 1) * hw].iter().copied().sum::<S>() * inv).collect()
}

pub(crate) fn gap_backward<S: Scalar>(dy: &[S], hw: usize) -> Vec<S> {
    let inv = S::of(1.0 / hw as f64);
    dy.iter().flat_map(|d| std::iter::repeat_n(*d * inv, hw)).collect()
}

/// `y = x · Wᵀ + b` with `x: n × d`, `W: out × d`.
pub(crate) fn fc_forward<S: Scalar>(x: &[S], n: usize, d: usize, w: &[S], b: &[S], out: usize) -> Vec<S> {
    let mut y = vec![S::zero(); n * out];
    for s in 0..n {
        y[s * out..(s + 1) * out].copy_from_slice(b);
    }
    S::gemm(n, d, out, S::one(), x, d, 1, w, 1, d, S::one(), &mut y, out, 1);
    y
}

/// Returns `(dx, dw, db)`.
pub(crate) fn fc_backward<S: Scalar>(
    x: &[S],
    n: usize,
    d: usize,
    w: &[S],
    dy: &[S],
    out: usize,
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let mut dx = vec![S::zero(); n * d];
    let mut dw = vec![S::zero(); out * d];
    S::gemm(n, out, d, S::one(), dy, out, 1, w, d, 1, S::zero(), &mut dx, d, 1);
    S::gemm(out, n, d, S::one(), dy, 1, out, x, d, 1, S::zero(), &mut dw, d, 1);
    let db = (0..out).map(|o| (0..n).map(|s| dy[s * out + o]).sum::<S>()).collect();
    (dx, dw, db)
}
