//! Tensor-in, tensor-out versions of the differentiable primitives, for use
//! outside a recording.

use super::kernels;
use crate::error::{PggaError, Result};
use crate::tensor::Tensor;

/// Running-statistics momentum for batch norm.
pub const BN_MOMENTUM: f64 = 0.1;
pub use super::kernels::BN_EPS;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    Avg,
    Max,
}

/// Running mean/variance of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnState {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub populated: bool,
}

impl BnState {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            populated: false,
        }
    }

    /// Exponential moving average update from one batch.
    pub fn update(&mut self, batch_mean: &[f64], batch_var: &[f64]) {
        for (r, &b) in self.mean.iter_mut().zip(batch_mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
        for (r, &b) in self.var.iter_mut().zip(batch_var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
        self.populated = true;
    }
}

fn batched(x: &Tensor) -> Result<Tensor> {
    match x.rank() {
        3 => {
            let mut s = vec![1];
            s.extend_from_slice(x.shape());
            x.reshape(&s)
        }
        4 => Ok(x.clone()),
        _ => Err(PggaError::shape("conv2d", "C×H×W or B×C×H×W", format!("{:?}", x.shape()))),
    }
}

/// 2-D convolution, zero padded, no bias. Accepts `C×H×W` or `B×C×H×W`.
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let xb = batched(x)?;
    let (y, _, _) = kernels::conv2d_forward(&xb, w, stride, pad)?;
    if x.rank() == 3 {
        y.reshape(&y.shape()[1..])
    } else {
        Ok(y)
    }
}

/// Per-channel pooling of `C×H×W` (→ `C`) or `B×C×H×W` (→ `B×C`).
pub fn global_pool(x: &Tensor, mode: PoolMode) -> Result<Tensor> {
    let xb = match x.rank() {
        3 => batched(x)?,
        4 => x.clone(),
        _ => return Err(PggaError::shape("global_pool", "C×H×W", format!("{:?}", x.shape()))),
    };
    let y = match mode {
        PoolMode::Avg => kernels::avg_pool(&xb)?,
        PoolMode::Max => kernels::max_pool(&xb)?.0,
    };
    if x.rank() == 3 {
        y.reshape(&y.shape()[1..])
    } else {
        Ok(y)
    }
}

/// Batch normalization of `B×C×…`. Training mode normalizes with batch
/// statistics and folds them into `state`; eval mode uses `state`.
pub fn batch_norm(x: &Tensor, scale: &Tensor, shift: &Tensor, state: &mut BnState, mode: Mode) -> Result<Tensor> {
    match mode {
        Mode::Train => {
            let (y, saved) = kernels::batch_norm_forward(x, scale, shift, None)?;
            state.update(&saved.mean, &saved.var);
            Ok(y)
        }
        Mode::Eval => {
            if !state.populated {
                return Err(PggaError::BnNotReady("batch_norm".into()));
            }
            Ok(kernels::batch_norm_forward(x, scale, shift, Some((&state.mean, &state.var)))?.0)
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Elementwise<'a> {
    Relu,
    Logistic,
    Mul(&'a Tensor),
    Add(&'a Tensor),
    Scale(f64),
}

/// Point-wise maps. `Mul`/`Add` accept equal shapes or a channel vector
/// broadcast over trailing dims (`C` against `C×H×W`).
pub fn elementwise(x: &Tensor, op: Elementwise<'_>) -> Result<Tensor> {
    let binary = |y: &Tensor, f: fn(f64, f64) -> f64| -> Result<Tensor> {
        if y.rank() > x.rank() || x.shape()[..y.rank()] != *y.shape() {
            return Err(PggaError::shape(
                "elementwise",
                format!("{:?} or a leading prefix of it", x.shape()),
                format!("{:?}", y.shape()),
            ));
        }
        let inner = x.numel() / y.numel();
        let data = x.data().iter().enumerate().map(|(i, &v)| f(v, y.data()[i / inner])).collect();
        Tensor::new(x.shape(), data)
    };
    match op {
        Elementwise::Relu => Ok(x.map(|v| if v > 0.0 { v } else { 0.0 })),
        Elementwise::Logistic => Ok(x.map(kernels::logistic)),
        Elementwise::Scale(s) => Ok(x.map(|v| v * s)),
        Elementwise::Mul(y) => binary(y, |a, b| a * b),
        Elementwise::Add(y) => binary(y, |a, b| a + b),
    }
}
