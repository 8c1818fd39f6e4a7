use std::collections::BTreeMap;

use super::graph::Gradients;
use super::params::Params;
use crate::error::{PggaError, Result};
use crate::tensor::Tensor;

/// SGD with momentum and L2 weight decay.
///
/// Parameters whose name starts with one of the `groups` prefixes use that
/// group's learning rate, all others use `lr`.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub groups: Vec<(String, f64)>,
    pub velocity: BTreeMap<String, Tensor>,
}

impl OptimizerState {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(PggaError::InvalidArgument(format!("learning rate must be ≥ 0, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(PggaError::InvalidArgument(format!("momentum must lie in [0,1), got {momentum}")));
        }
        if !(weight_decay >= 0.0) {
            return Err(PggaError::InvalidArgument(format!("weight decay must be ≥ 0, got {weight_decay}")));
        }
        Ok(Self {
            lr,
            momentum,
            weight_decay,
            groups: Vec::new(),
            velocity: BTreeMap::new(),
        })
    }

    pub fn with_group(mut self, prefix: impl Into<String>, lr: f64) -> Self {
        self.groups.push((prefix.into(), lr));
        self
    }

    pub fn lr_for(&self, name: &str) -> f64 {
        self.groups
            .iter()
            .find(|(p, _)| name.starts_with(p.as_str()))
            .map_or(self.lr, |&(_, lr)| lr)
    }
}

/// `g' = g + wd·p; v ← m·v + g'; p ← p − lr·v` for every parameter with a
/// gradient. A non-finite gradient rejects the whole step before any
/// parameter changes.
pub fn sgd_step(params: &mut Params, grads: &Gradients, state: &mut OptimizerState) -> Result<()> {
    for (name, g) in grads.iter() {
        let p = params
            .get(name)
            .ok_or_else(|| PggaError::InvalidArgument(format!("gradient for unknown parameter `{name}`")))?;
        if p.shape() != g.shape() {
            return Err(PggaError::shape("sgd_step", format!("{:?}", p.shape()), format!("{:?}", g.shape())));
        }
        if !g.all_finite() {
            return Err(PggaError::NonFinite(format!("gradient of `{name}`")));
        }
    }
    for (name, g) in grads.iter() {
        let lr = state.lr_for(name);
        let (momentum, wd) = (state.momentum, state.weight_decay);
        let p = params.get_mut(name).expect("checked above");
        let v = state
            .velocity
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        for ((pi, vi), gi) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            let gd = gi + wd * *pi;
            *vi = momentum * *vi + gd;
            *pi -= lr * *vi;
        }
    }
    Ok(())
}
