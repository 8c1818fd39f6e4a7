//! Forward and backward kernels used by the tape.
//!
//! All kernels work on flat row-major buffers. Convolutions are lowered to
//! GEMM through an im2col buffer which the forward pass hands back so the
//! backward pass can reuse it.

use crate::error::{PggaError, Result};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const NORM_EPS: f64 = 1e-12;

/// Correctly rounded sum (Shewchuk's partials with a final half-even
/// correction). The result does not depend on the order of the terms.
pub(crate) fn exact_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let mut partials: Vec<f64> = Vec::new();
    for mut x in xs {
        let mut i = 0;
        for j in 0..partials.len() {
            let mut y = partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        partials.truncate(i);
        partials.push(x);
    }
    let Some(mut hi) = partials.pop() else {
        return 0.0;
    };
    let mut lo = 0.0;
    while let Some(y) = partials.pop() {
        let x = hi;
        hi = x + y;
        lo = y - (hi - x);
        if lo != 0.0 {
            break;
        }
    }
    if let Some(&next) = partials.last() {
        if (lo < 0.0 && next < 0.0) || (lo > 0.0 && next > 0.0) {
            let y = lo * 2.0;
            let x = hi + y;
            if y == x - hi {
                hi = x;
            }
        }
    }
    hi
}

/// `c = a·b` (or `c += a·b` when `accumulate`), with `a` logically `m×k` and
/// `b` logically `k×n`. The `*_t` flags mean the operand is stored transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: bounds asserted above; strides describe the row-major layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x.len() != 4 {
            return Err(PggaError::shape("conv2d", "input B×C×H×W", format!("{x:?}")));
        }
        if w.len() != 4 || w[2] != w[3] {
            return Err(PggaError::shape("conv2d", "kernel C_out×C_in×k×k", format!("{w:?}")));
        }
        if w[1] != x[1] {
            return Err(PggaError::shape(
                "conv2d",
                format!("{} input channels (kernel {w:?})", w[1]),
                format!("input {x:?}"),
            ));
        }
        let k = w[2];
        if k.is_multiple_of(2) {
            return Err(PggaError::InvalidArgument(format!("conv2d kernel size must be odd, got {k}")));
        }
        if !(stride == 1 || stride == 2) {
            return Err(PggaError::InvalidArgument(format!("conv2d stride must be 1 or 2, got {stride}")));
        }
        let (h, wd) = (x[2], x[3]);
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(PggaError::shape(
                "conv2d",
                format!("spatial size ≥ {} after padding", k),
                format!("{h}×{wd} with pad {pad}"),
            ));
        }
        Ok(Self {
            batch: x[0],
            c_in: x[1],
            h,
            w: wd,
            c_out: w[0],
            k,
            stride,
            pad,
            h_out: (h + 2 * pad - k) / stride + 1,
            w_out: (wd + 2 * pad - k) / stride + 1,
        })
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.batch * self.h_out * self.w_out
    }
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let ncols = g.col_cols();
    let mut cols = vec![0.0; g.col_rows() * ncols];
    let hw_out = g.h_out * g.w_out;
    for c in 0..g.c_in {
        for u in 0..g.k {
            for v in 0..g.k {
                let row = (c * g.k + u) * g.k + v;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for b in 0..g.batch {
                    let plane = &x[(b * g.c_in + c) * g.h * g.w..][..g.h * g.w];
                    for i in 0..g.h_out {
                        let r = (i * g.stride + u) as isize - g.pad as isize;
                        if r < 0 || r >= g.h as isize {
                            continue;
                        }
                        let src_row = &plane[r as usize * g.w..][..g.w];
                        let out = &mut dst[b * hw_out + i * g.w_out..][..g.w_out];
                        for (j, o) in out.iter_mut().enumerate() {
                            let col = (j * g.stride + v) as isize - g.pad as isize;
                            if col >= 0 && col < g.w as isize {
                                *o = src_row[col as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let ncols = g.col_cols();
    let mut x = vec![0.0; g.batch * g.c_in * g.h * g.w];
    let hw_out = g.h_out * g.w_out;
    for c in 0..g.c_in {
        for u in 0..g.k {
            for v in 0..g.k {
                let row = (c * g.k + u) * g.k + v;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for b in 0..g.batch {
                    let plane = &mut x[(b * g.c_in + c) * g.h * g.w..][..g.h * g.w];
                    for i in 0..g.h_out {
                        let r = (i * g.stride + u) as isize - g.pad as isize;
                        if r < 0 || r >= g.h as isize {
                            continue;
                        }
                        let dst_row = &mut plane[r as usize * g.w..][..g.w];
                        let inp = &src[b * hw_out + i * g.w_out..][..g.w_out];
                        for (j, &val) in inp.iter().enumerate() {
                            let col = (j * g.stride + v) as isize - g.pad as isize;
                            if col >= 0 && col < g.w as isize {
                                dst_row[col as usize] += val;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// Returns the output and the im2col buffer.
pub(crate) fn conv2d_forward(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<(Tensor, ConvGeom, Vec<f64>)> {
    let g = ConvGeom::new(x.shape(), w.shape(), stride, pad)?;
    let cols = im2col(x.data(), &g);
    let n = g.col_cols();
    let mut ymat = vec![0.0; g.c_out * n];
    gemm(g.c_out, g.col_rows(), n, w.data(), false, &cols, false, &mut ymat, false);
    let hw_out = g.h_out * g.w_out;
    let mut y = vec![0.0; g.batch * g.c_out * hw_out];
    for o in 0..g.c_out {
        for b in 0..g.batch {
            y[(b * g.c_out + o) * hw_out..][..hw_out].copy_from_slice(&ymat[o * n + b * hw_out..][..hw_out]);
        }
    }
    let y = Tensor::new(&[g.batch, g.c_out, g.h_out, g.w_out], y)?;
    Ok((y, g, cols))
}

/// Gradients with respect to the input (if requested) and the kernel.
pub(crate) fn conv2d_backward(
    dy: &[f64],
    w: &Tensor,
    g: &ConvGeom,
    cols: &[f64],
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let n = g.col_cols();
    let hw_out = g.h_out * g.w_out;
    let mut dymat = vec![0.0; g.c_out * n];
    for o in 0..g.c_out {
        for b in 0..g.batch {
            dymat[o * n + b * hw_out..][..hw_out].copy_from_slice(&dy[(b * g.c_out + o) * hw_out..][..hw_out]);
        }
    }
    let dw = want_dw.then(|| {
        let mut dw = vec![0.0; g.c_out * g.col_rows()];
        gemm(g.c_out, n, g.col_rows(), &dymat, false, cols, true, &mut dw, false);
        dw
    });
    let dx = want_dx.then(|| {
        let mut dcols = vec![0.0; g.col_rows() * n];
        gemm(g.col_rows(), g.c_out, n, w.data(), true, &dymat, false, &mut dcols, false);
        col2im(&dcols, g)
    });
    (dx, dw)
}

/// Splits a `B×C×rest` shape into (batch, channels, inner) counts.
pub(crate) fn bcs(shape: &[usize]) -> (usize, usize, usize) {
    let inner: usize = shape[2..].iter().product();
    (shape[0], shape[1], inner)
}

pub(crate) struct BnSaved {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Batch normalization. With `running = None` the batch statistics are used
/// (biased variance); otherwise the supplied mean/variance.
pub(crate) fn batch_norm_forward(
    x: &Tensor,
    scale: &Tensor,
    shift: &Tensor,
    running: Option<(&[f64], &[f64])>,
) -> Result<(Tensor, BnSaved)> {
    if x.rank() < 2 {
        return Err(PggaError::shape("batch_norm", "B×C×…", format!("{:?}", x.shape())));
    }
    let (b, c, inner) = bcs(x.shape());
    scale.expect_shape("batch_norm scale", &[c])?;
    shift.expect_shape("batch_norm shift", &[c])?;
    let count = (b * inner) as f64;
    let xd = x.data();
    let (mean, var) = match running {
        Some((m, v)) => {
            if m.len() != c || v.len() != c {
                return Err(PggaError::shape("batch_norm running stats", format!("{c}"), format!("{}", m.len())));
            }
            (m.to_vec(), v.to_vec())
        }
        None => {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let mut s = 0.0;
                for bi in 0..b {
                    s += xd[(bi * c + ch) * inner..][..inner].iter().sum::<f64>();
                }
                let m = s / count;
                let mut sq = 0.0;
                for bi in 0..b {
                    sq += xd[(bi * c + ch) * inner..][..inner].iter().map(|v| (v - m) * (v - m)).sum::<f64>();
                }
                mean[ch] = m;
                var[ch] = sq / count;
            }
            (mean, var)
        }
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = vec![0.0; xd.len()];
    let mut y = vec![0.0; xd.len()];
    for bi in 0..b {
        for ch in 0..c {
            let base = (bi * c + ch) * inner;
            for i in base..base + inner {
                let h = (xd[i] - mean[ch]) * inv_std[ch];
                xhat[i] = h;
                y[i] = scale.data()[ch] * h + shift.data()[ch];
            }
        }
    }
    Ok((
        Tensor::new(x.shape(), y)?,
        BnSaved {
            xhat,
            inv_std,
            mean,
            var,
        },
    ))
}

/// Returns (dx, dscale, dshift).
pub(crate) fn batch_norm_backward(
    dy: &[f64],
    shape: &[usize],
    scale: &[f64],
    saved: &BnSaved,
    batch_stats: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (b, c, inner) = bcs(shape);
    let count = (b * inner) as f64;
    let mut dscale = vec![0.0; c];
    let mut dshift = vec![0.0; c];
    for bi in 0..b {
        for ch in 0..c {
            let base = (bi * c + ch) * inner;
            for i in base..base + inner {
                dscale[ch] += dy[i] * saved.xhat[i];
                dshift[ch] += dy[i];
            }
        }
    }
    let mut dx = vec![0.0; dy.len()];
    for ch in 0..c {
        let g = scale[ch] * saved.inv_std[ch];
        // Σ dxhat = scale·dshift, Σ dxhat·xhat = scale·dscale
        let mean_d = dshift[ch] / count;
        let mean_dx = dscale[ch] / count;
        for bi in 0..b {
            let base = (bi * c + ch) * inner;
            for i in base..base + inner {
                dx[i] = if batch_stats {
                    g * (dy[i] - mean_d - saved.xhat[i] * mean_dx)
                } else {
                    g * dy[i]
                };
            }
        }
    }
    (dx, dscale, dshift)
}

pub(crate) fn logistic(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Average over trailing dims of a `B×C×…` tensor.
pub(crate) fn avg_pool(x: &Tensor) -> Result<Tensor> {
    if x.rank() < 3 {
        return Err(PggaError::shape("global_pool", "B×C×H×W", format!("{:?}", x.shape())));
    }
    let (b, c, inner) = bcs(x.shape());
    let data = x
        .data()
        .chunks(inner)
        .map(|ch| ch.iter().sum::<f64>() / inner as f64)
        .collect();
    Tensor::new(&[b, c], data)
}

/// Max over trailing dims; ties resolve to the first row-major index.
pub(crate) fn max_pool(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    if x.rank() < 3 {
        return Err(PggaError::shape("global_pool", "B×C×H×W", format!("{:?}", x.shape())));
    }
    let (b, c, inner) = bcs(x.shape());
    let mut vals = Vec::with_capacity(b * c);
    let mut arg = Vec::with_capacity(b * c);
    for (n, ch) in x.data().chunks(inner).enumerate() {
        let mut best = 0;
        for (i, &v) in ch.iter().enumerate() {
            if v > ch[best] {
                best = i;
            }
        }
        vals.push(ch[best]);
        arg.push(n * inner + best);
    }
    Ok((Tensor::new(&[b, c], vals)?, arg))
}

/// Softmax cross-entropy summed over rows. Returns the loss and the softmax.
pub(crate) fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    logits.expect_rank("cross_entropy", 2)?;
    let (rows, classes) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != rows {
        return Err(PggaError::shape("cross_entropy labels", format!("{rows}"), format!("{}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(PggaError::InvalidArgument(format!("label {bad} out of range [0, {classes})")));
    }
    let mut loss = 0.0;
    let mut probs = vec![0.0; rows * classes];
    for (r, &y) in labels.iter().enumerate() {
        let z = &logits.data()[r * classes..][..classes];
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let p = &mut probs[r * classes..][..classes];
        let mut sum = 0.0;
        for (pi, &zi) in p.iter_mut().zip(z) {
            *pi = (zi - m).exp();
            sum += *pi;
        }
        for pi in p.iter_mut() {
            *pi /= sum;
        }
        loss += if z[y] == m {
            // sum = 1 + Σ_{c≠y} e^{z_c−m}; ln_1p keeps the tiny-loss regime exact
            (sum - 1.0).ln_1p()
        } else {
            m - z[y] + sum.ln()
        };
    }
    Ok((loss, probs))
}

/// One active hinge term of the batch-hard triplet loss.
#[derive(Debug, Clone, Copy)]
pub(crate) struct HardTriplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

pub(crate) fn pairwise_distances(x: &[f64], rows: usize, dim: usize) -> Vec<f64> {
    let mut d = vec![0.0; rows * rows];
    for i in 0..rows {
        for j in (i + 1)..rows {
            let s: f64 = x[i * dim..][..dim]
                .iter()
                .zip(&x[j * dim..][..dim])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            let v = s.sqrt();
            d[i * rows + j] = v;
            d[j * rows + i] = v;
        }
    }
    d
}

/// Batch-hard triplet loss summed over anchors, plus the active triplets and
/// the distance matrix used.
pub(crate) fn batch_hard_triplet(feats: &Tensor, labels: &[usize], margin: f64) -> Result<(f64, Vec<HardTriplet>, Vec<f64>)> {
    feats.expect_rank("batch_hard_triplet", 2)?;
    let (rows, dim) = (feats.shape()[0], feats.shape()[1]);
    if labels.len() != rows {
        return Err(PggaError::shape("batch_hard_triplet labels", format!("{rows}"), format!("{}", labels.len())));
    }
    let d = pairwise_distances(feats.data(), rows, dim);
    let mut loss = 0.0;
    let mut active = Vec::new();
    for a in 0..rows {
        let mut pos: Option<usize> = None;
        let mut neg: Option<usize> = None;
        for j in 0..rows {
            if j == a {
                continue;
            }
            let dj = d[a * rows + j];
            if labels[j] == labels[a] {
                if pos.is_none_or(|p| dj > d[a * rows + p]) {
                    pos = Some(j);
                }
            } else if neg.is_none_or(|n| dj < d[a * rows + n]) {
                neg = Some(j);
            }
        }
        let (Some(p), Some(n)) = (pos, neg) else {
            return Err(PggaError::InvalidArgument(format!(
                "anchor {a} lacks a positive or a negative in the batch"
            )));
        };
        let term = d[a * rows + p] - d[a * rows + n] + margin;
        if term > 0.0 {
            loss += term;
            active.push(HardTriplet {
                anchor: a,
                positive: p,
                negative: n,
            });
        }
    }
    Ok((loss, active, d))
}

pub(crate) fn batch_hard_triplet_backward(
    upstream: f64,
    feats: &Tensor,
    active: &[HardTriplet],
    dist: &[f64],
) -> Vec<f64> {
    let (rows, dim) = (feats.shape()[0], feats.shape()[1]);
    let x = feats.data();
    let mut g = vec![0.0; x.len()];
    let mut push = |i: usize, j: usize, sign: f64| {
        let dij = dist[i * rows + j];
        if dij <= 0.0 {
            return;
        }
        for t in 0..dim {
            let u = sign * upstream * (x[i * dim + t] - x[j * dim + t]) / dij;
            g[i * dim + t] += u;
            g[j * dim + t] -= u;
        }
    };
    for t in active {
        push(t.anchor, t.positive, 1.0);
        push(t.anchor, t.negative, -1.0);
    }
    g
}
