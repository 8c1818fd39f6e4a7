//! Identity classification and batch-hard triplet losses.

use std::collections::BTreeMap;

use crate::autodiff::kernels;
use crate::autodiff::{Graph, NodeId};
use crate::error::{PggaError, Result};
use crate::network::layers::Fwd;
use crate::network::{Outputs, NUM_VECTORS};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Triplet margin γ.
    pub margin: f64,
    /// Weight τ of the identity loss.
    pub tau: f64,
    pub p: usize,
    pub k: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin: 1.2,
            tau: 2.0,
            p: 4,
            k: 4,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) || !(self.tau > 0.0) || self.p < 2 || self.k < 2 {
            return Err(PggaError::Config(format!(
                "loss config needs γ > 0, τ > 0, P ≥ 2, K ≥ 2, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Checks that `labels` hold at least two identities with at least two
/// samples each.
pub fn check_triplet_batch(labels: &[usize]) -> Result<()> {
    let mut counts = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    if counts.len() < 2 || counts.values().any(|&c| c < 2) {
        return Err(PggaError::InvalidArgument(format!(
            "triplet batch needs ≥ 2 identities with ≥ 2 samples each, got counts {counts:?}"
        )));
    }
    Ok(())
}

/// Checks the exact `P` identities × `K` samples layout.
pub fn check_pk_batch(labels: &[usize], p: usize, k: usize) -> Result<()> {
    let mut counts = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    if labels.len() != p * k || counts.len() != p || counts.values().any(|&c| c != k) {
        return Err(PggaError::InvalidArgument(format!(
            "batch is not {p}×{k}: label counts {counts:?}"
        )));
    }
    Ok(())
}

/// Mean over heads of the batch-summed softmax cross-entropy of
/// bias-free classifiers.
pub fn id_loss_graph(g: &mut Graph, feats: &[NodeId], heads: &[NodeId], labels: &[usize]) -> Result<NodeId> {
    if feats.len() != heads.len() || feats.is_empty() {
        return Err(PggaError::shape("id_loss", format!("{} heads", feats.len()), format!("{}", heads.len())));
    }
    let mut total = None;
    for (&x, &w) in feats.iter().zip(heads) {
        let logits = g.linear(x, w)?;
        let ce = g.cross_entropy(logits, labels)?;
        total = Some(match total {
            None => ce,
            Some(t) => g.add(t, ce)?,
        });
    }
    Ok(g.scale(total.unwrap(), 1.0 / feats.len() as f64))
}

/// Mean over heads of the anchor-summed batch-hard triplet loss.
pub fn triplet_graph(g: &mut Graph, feats: &[NodeId], labels: &[usize], margin: f64) -> Result<NodeId> {
    check_triplet_batch(labels)?;
    let mut total = None;
    for &x in feats {
        let t = g.batch_hard_triplet(x, labels, margin)?;
        total = Some(match total {
            None => t,
            Some(s) => g.add(s, t)?,
        });
    }
    let total = total.ok_or_else(|| PggaError::InvalidArgument("no triplet heads".into()))?;
    Ok(g.scale(total, 1.0 / feats.len() as f64))
}

/// `l_tri + τ·l_id`.
pub fn total_graph(g: &mut Graph, l_tri: NodeId, l_id: NodeId, tau: f64) -> Result<NodeId> {
    let w = g.scale(l_id, tau);
    g.add(l_tri, w)
}

pub fn total_loss(l_tri: f64, l_id: f64, tau: f64) -> f64 {
    l_tri + tau * l_id
}

/// Identity loss over `B×d` features and `N_id×d` heads, as plain values.
pub fn id_loss(feats: &[Tensor], heads: &[Tensor], labels: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let f: Vec<NodeId> = feats.iter().map(|t| g.constant(t.clone())).collect();
    let h: Vec<NodeId> = heads.iter().map(|t| g.constant(t.clone())).collect();
    let l = id_loss_graph(&mut g, &f, &h, labels)?;
    Ok(g.value(l).item())
}

/// Triplet loss over per-head `B×d` features, as a plain value.
pub fn batch_hard_triplet(feats: &[Tensor], labels: &[usize], margin: f64) -> Result<f64> {
    let mut g = Graph::new();
    let f: Vec<NodeId> = feats.iter().map(|t| g.constant(t.clone())).collect();
    let l = triplet_graph(&mut g, &f, labels, margin)?;
    Ok(g.value(l).item())
}

/// Per-anchor hinge terms `[hp − hn + γ]₊` of one `B×d` head.
pub fn triplet_anchor_terms(feats: &Tensor, labels: &[usize], margin: f64) -> Result<Vec<f64>> {
    check_triplet_batch(labels)?;
    let (_, active, dist) = kernels::batch_hard_triplet(feats, labels, margin)?;
    let b = labels.len();
    let mut terms = vec![0.0; b];
    for t in active {
        terms[t.anchor] = dist[t.anchor * b + t.positive] - dist[t.anchor * b + t.negative] + margin;
    }
    Ok(terms)
}

/// Loss nodes of a recorded forward pass.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub id: NodeId,
    pub tri: NodeId,
    pub total: NodeId,
}

/// Identity loss on all eight vectors, triplet loss on the three globals.
pub fn network_loss(f: &mut Fwd, out: &Outputs, labels: &[usize], lc: &LossConfig) -> Result<LossNodes> {
    let feats = out.head_inputs(&mut f.g)?;
    let heads = (0..NUM_VECTORS)
        .map(|k| f.p(&format!("head/{k}")))
        .collect::<Result<Vec<_>>>()?;
    let id = id_loss_graph(&mut f.g, &feats, &heads, labels)?;
    let tri = triplet_graph(&mut f.g, &out.globals, labels, lc.margin)?;
    let total = total_graph(&mut f.g, tri, id, lc.tau)?;
    Ok(LossNodes { id, tri, total })
}
