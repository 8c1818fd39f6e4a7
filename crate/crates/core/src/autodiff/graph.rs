//! Record-and-replay reverse-mode differentiation over [`Tensor`]s.
//!
//! Every operation appends a node holding its output value plus whatever
//! the backward pass needs. Nodes only reference earlier nodes, so the
//! record is topologically ordered by construction; `backward` still
//! validates this because records can be edited through [`Graph::set_input`].

use std::collections::BTreeMap;

use super::kernels::{self, BnSaved, ConvGeom, HardTriplet, NORM_EPS};
use crate::error::{PggaError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Conv2d { geom: ConvGeom, cols: Vec<f64> },
    BatchNorm { saved: BnSaved, batch_stats: bool },
    Relu,
    Logistic,
    Mul,
    Add,
    Scale(f64),
    AvgPool,
    MaxPool { argmax: Vec<usize> },
    SliceRows { start: usize },
    Linear,
    Stack,
    Select(usize),
    BatchMatMul,
    TransposeLast,
    RowL2Normalize { norms: Vec<f64> },
    Reshape,
    Sum,
    CrossEntropy { labels: Vec<usize>, probs: Vec<f64> },
    Triplet { active: Vec<HardTriplet>, dist: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Relu => "relu",
            Op::Logistic => "logistic",
            Op::Mul => "mul",
            Op::Add => "add",
            Op::Scale(_) => "scale",
            Op::AvgPool => "avg_pool",
            Op::MaxPool { .. } => "max_pool",
            Op::SliceRows { .. } => "slice_rows",
            Op::Linear => "linear",
            Op::Stack => "stack",
            Op::Select(_) => "select",
            Op::BatchMatMul => "batch_matmul",
            Op::TransposeLast => "transpose_last",
            Op::RowL2Normalize { .. } => "row_l2_normalize",
            Op::Reshape => "reshape",
            Op::Sum => "sum",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Triplet { .. } => "batch_hard_triplet",
        }
    }
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
    param: Option<String>,
    requires_grad: bool,
}

/// Gradients keyed by parameter name. Uses of the same name accumulate.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    map: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor) {
        self.map.insert(name.into(), grad);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    fn accumulate(&mut self, name: &str, grad: &[f64], shape: &[usize]) {
        match self.map.get_mut(name) {
            Some(t) => t.data_mut().iter_mut().zip(grad).for_each(|(a, b)| *a += b),
            None => {
                self.map.insert(
                    name.to_string(),
                    Tensor::new(shape, grad.to_vec()).expect("gradient shape matches parameter"),
                );
            }
        }
    }
}

/// The computation record.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Name of the operation that produced `id`.
    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.name()
    }

    /// Input node ids of `id`.
    pub fn inputs(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id.0].inputs
    }

    /// Rewires one input of an existing node. Only the record's structure is
    /// changed; stored values are not recomputed.
    pub fn set_input(&mut self, node: NodeId, slot: usize, input: NodeId) {
        self.nodes[node.0].inputs[slot] = input;
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        debug_assert!(value.all_finite() || !inputs.is_empty());
        self.nodes.push(Node {
            op,
            inputs,
            value,
            param: None,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value,
            param: None,
            requires_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A named trainable leaf.
    pub fn param(&mut self, name: &str, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value,
            param: Some(name.to_string()),
            requires_grad: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let (y, geom, cols) = kernels::conv2d_forward(self.value(x), self.value(w), stride, pad)?;
        Ok(self.push(Op::Conv2d { geom, cols }, vec![x, w], y))
    }

    /// Batch normalization over a `B×C×…` input. `running = None` normalizes
    /// with batch statistics (training); the batch mean/variance can then be
    /// read back with [`Graph::batch_stats`].
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        scale: NodeId,
        shift: NodeId,
        running: Option<(&[f64], &[f64])>,
    ) -> Result<NodeId> {
        let (y, saved) = kernels::batch_norm_forward(self.value(x), self.value(scale), self.value(shift), running)?;
        Ok(self.push(
            Op::BatchNorm {
                saved,
                batch_stats: running.is_none(),
            },
            vec![x, scale, shift],
            y,
        ))
    }

    /// Batch mean and (biased) variance recorded by a training-mode batch norm.
    pub fn batch_stats(&self, id: NodeId) -> Option<(&[f64], &[f64])> {
        match &self.nodes[id.0].op {
            Op::BatchNorm {
                saved,
                batch_stats: true,
            } => Some((&saved.mean, &saved.var)),
            _ => None,
        }
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let y = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(Op::Relu, vec![x], y)
    }

    pub fn logistic(&mut self, x: NodeId) -> NodeId {
        let y = self.value(x).map(kernels::logistic);
        self.push(Op::Logistic, vec![x], y)
    }

    fn check_broadcast(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[..sb.len()] != *sb {
            return Err(PggaError::shape(
                op,
                format!("second operand equal to or a leading prefix of {sa:?}"),
                format!("{sb:?}"),
            ));
        }
        Ok(())
    }

    /// Element-wise product. `b` may also be a leading prefix of `a`'s shape
    /// (e.g. `B×C` against `B×C×H×W`), in which case it is broadcast over
    /// the trailing dimensions.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_broadcast("mul", a, b)?;
        let inner = self.value(a).numel() / self.value(b).numel();
        let bd = self.value(b).data();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * bd[i / inner])
            .collect();
        let y = Tensor::new(self.shape(a), data)?;
        Ok(self.push(Op::Mul, vec![a, b], y))
    }

    /// Element-wise sum with the same broadcasting rule as [`Graph::mul`].
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_broadcast("add", a, b)?;
        let inner = self.value(a).numel() / self.value(b).numel();
        let bd = self.value(b).data();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[i / inner])
            .collect();
        let y = Tensor::new(self.shape(a), data)?;
        Ok(self.push(Op::Add, vec![a, b], y))
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> NodeId {
        let y = self.value(x).map(|v| v * s);
        self.push(Op::Scale(s), vec![x], y)
    }

    /// Global average pooling, `B×C×…` → `B×C`.
    pub fn avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let y = kernels::avg_pool(self.value(x))?;
        Ok(self.push(Op::AvgPool, vec![x], y))
    }

    /// Global max pooling, `B×C×…` → `B×C`.
    pub fn max_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let (y, argmax) = kernels::max_pool(self.value(x))?;
        Ok(self.push(Op::MaxPool { argmax }, vec![x], y))
    }

    /// Rows `start..end` of a `B×C×H×W` map.
    pub fn slice_rows(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || start >= end || end > s[2] {
            return Err(PggaError::shape(
                "slice_rows",
                format!("B×C×H×W with {start} < {end} ≤ H"),
                format!("{s:?}"),
            ));
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let rows = end - start;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(b * c * rows * w);
        for plane in 0..b * c {
            data.extend_from_slice(&src[(plane * h + start) * w..(plane * h + end) * w]);
        }
        let y = Tensor::new(&[b, c, rows, w], data)?;
        Ok(self.push(Op::SliceRows { start }, vec![x], y))
    }

    /// `x·wᵀ` over the last dimension: `…×In` with `w: Out×In` gives `…×Out`.
    pub fn linear(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sw.len() != 2 || sx.is_empty() || *sx.last().unwrap() != sw[1] {
            return Err(PggaError::shape("linear", format!("…×{} input for weight {sw:?}", sw.get(1).unwrap_or(&0)), format!("{sx:?}")));
        }
        let (k, n) = (sw[1], sw[0]);
        let m = self.value(x).numel() / k;
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.value(x).data(), false, self.value(w).data(), true, &mut out, false);
        let mut shape = sx.clone();
        *shape.last_mut().unwrap() = n;
        let y = Tensor::new(&shape, out)?;
        Ok(self.push(Op::Linear, vec![x, w], y))
    }

    /// Stacks equally shaped `B×…` tensors along a new axis 1.
    pub fn stack(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let first = self.shape(xs[0]).to_vec();
        for &x in xs {
            if self.shape(x) != first.as_slice() {
                return Err(PggaError::shape("stack", format!("{first:?}"), format!("{:?}", self.shape(x))));
            }
        }
        let b = first[0];
        let inner: usize = first[1..].iter().product();
        let mut data = Vec::with_capacity(b * xs.len() * inner);
        for bi in 0..b {
            for &x in xs {
                data.extend_from_slice(&self.value(x).data()[bi * inner..][..inner]);
            }
        }
        let mut shape = vec![b, xs.len()];
        shape.extend_from_slice(&first[1..]);
        let y = Tensor::new(&shape, data)?;
        Ok(self.push(Op::Stack, xs.to_vec(), y))
    }

    /// Entry `index` along axis 1: `B×K×…` → `B×…`.
    pub fn select(&mut self, x: NodeId, index: usize) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || index >= s[1] {
            return Err(PggaError::shape("select", format!("B×K×… with K > {index}"), format!("{s:?}")));
        }
        let inner: usize = s[2..].iter().product();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(s[0] * inner);
        for bi in 0..s[0] {
            data.extend_from_slice(&src[(bi * s[1] + index) * inner..][..inner]);
        }
        let mut shape = vec![s[0]];
        shape.extend_from_slice(&s[2..]);
        let y = Tensor::new(&shape, data)?;
        Ok(self.push(Op::Select(index), vec![x], y))
    }

    /// `B×M×K` times `B×K×N`. Every dot product is correctly rounded, so
    /// permuting the inner axis of both operands leaves the result unchanged
    /// bit for bit.
    pub fn batch_matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(PggaError::shape("batch_matmul", format!("B×{}×N for left {sa:?}", sa.get(2).unwrap_or(&0)), format!("{sb:?}")));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(bs * m * n);
        for bi in 0..bs {
            let (ab, bb) = (&av[bi * m * k..(bi + 1) * m * k], &bv[bi * k * n..(bi + 1) * k * n]);
            for i in 0..m {
                for j in 0..n {
                    out.push(kernels::exact_sum((0..k).map(|t| ab[i * k + t] * bb[t * n + j])));
                }
            }
        }
        let y = Tensor::new(&[bs, m, n], out)?;
        Ok(self.push(Op::BatchMatMul, vec![a, b], y))
    }

    /// Swaps the last two axes of a `B×M×N` tensor.
    pub fn transpose_last(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        self.value(x).expect_rank("transpose_last", 3)?;
        let y = transpose_bmn(self.value(x).data(), s[0], s[1], s[2]);
        let y = Tensor::new(&[s[0], s[2], s[1]], y)?;
        Ok(self.push(Op::TransposeLast, vec![x], y))
    }

    /// Divides each last-axis row by its L2 norm (a correctly rounded sum of
    /// squares, independent of element order). Rows with norm below
    /// `1e-12` are set to zero (see [`Graph::degenerate_rows`]).
    pub fn row_l2_normalize(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        if v.rank() == 0 {
            return Err(PggaError::shape("row_l2_normalize", "rank ≥ 1", "scalar"));
        }
        let n = *v.shape().last().unwrap();
        let mut norms = Vec::with_capacity(v.numel() / n);
        let mut data = Vec::with_capacity(v.numel());
        for row in v.data().chunks(n) {
            let norm = kernels::exact_sum(row.iter().map(|a| a * a)).sqrt();
            norms.push(norm);
            if norm < NORM_EPS {
                data.extend(std::iter::repeat_n(0.0, n));
            } else {
                data.extend(row.iter().map(|a| a / norm));
            }
        }
        let y = Tensor::new(v.shape(), data)?;
        Ok(self.push(Op::RowL2Normalize { norms }, vec![x], y))
    }

    /// Flat indices of rows zeroed by a [`Graph::row_l2_normalize`] node.
    pub fn degenerate_rows(&self, id: NodeId) -> Vec<usize> {
        match &self.nodes[id.0].op {
            Op::RowL2Normalize { norms } => norms
                .iter()
                .enumerate()
                .filter(|(_, &n)| n < NORM_EPS)
                .map(|(i, _)| i)
                .collect(),
            _ => Vec::new(),
        }
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let y = self.value(x).reshape(shape)?;
        Ok(self.push(Op::Reshape, vec![x], y))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let y = Tensor::scalar(self.value(x).data().iter().sum());
        self.push(Op::Sum, vec![x], y)
    }

    /// Softmax cross-entropy of `B×N` logits, summed over the batch.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (loss, probs) = kernels::cross_entropy(self.value(logits), labels)?;
        Ok(self.push(
            Op::CrossEntropy {
                labels: labels.to_vec(),
                probs,
            },
            vec![logits],
            Tensor::scalar(loss),
        ))
    }

    /// Batch-hard triplet loss of `B×d` features, summed over anchors.
    pub fn batch_hard_triplet(&mut self, feats: NodeId, labels: &[usize], margin: f64) -> Result<NodeId> {
        let (loss, active, dist) = kernels::batch_hard_triplet(self.value(feats), labels, margin)?;
        Ok(self.push(Op::Triplet { active, dist }, vec![feats], Tensor::scalar(loss)))
    }

    /// Checks that every input references an earlier node.
    pub fn validate(&self) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(bad) = node.inputs.iter().find(|inp| inp.0 >= i) {
                return Err(PggaError::CyclicRecord { node: i, input: bad.0 });
            }
        }
        Ok(())
    }

    /// Reverse pass from a scalar node. Returns gradients for every named
    /// parameter that influences `loss`; unnamed leaves are skipped.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        self.validate()?;
        if self.value(loss).numel() != 1 {
            return Err(PggaError::shape("backward", "scalar loss", format!("{:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::new();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if let Some(name) = &node.param {
                out.accumulate(name, &g, node.value.shape());
                continue;
            }
            if !node.requires_grad {
                continue;
            }
            let want: Vec<bool> = node.inputs.iter().map(|i| self.nodes[i.0].requires_grad).collect();
            let contributions = self.node_backward(node, &g, &want);
            for ((input, contrib), wanted) in node.inputs.iter().zip(contributions).zip(want) {
                if !wanted {
                    continue;
                }
                let Some(contrib) = contrib else { continue };
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(out)
    }

    fn node_backward(&self, node: &Node, g: &[f64], want: &[bool]) -> Vec<Option<Vec<f64>>> {
        let input = |i: usize| &self.nodes[node.inputs[i].0].value;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv2d { geom, cols } => {
                let (dx, dw) = kernels::conv2d_backward(g, input(1), geom, cols, want[0], want[1]);
                vec![dx, dw]
            }
            Op::BatchNorm { saved, batch_stats } => {
                let (dx, ds, db) = kernels::batch_norm_backward(g, node.value.shape(), input(1).data(), saved, *batch_stats);
                vec![Some(dx), Some(ds), Some(db)]
            }
            Op::Relu => {
                let x = input(0).data();
                vec![Some(g.iter().zip(x).map(|(&gi, &xi)| if xi > 0.0 { gi } else { 0.0 }).collect())]
            }
            Op::Logistic => {
                let y = node.value.data();
                vec![Some(g.iter().zip(y).map(|(&gi, &yi)| gi * yi * (1.0 - yi)).collect())]
            }
            Op::Mul => {
                let (a, b) = (input(0).data(), input(1).data());
                let inner = a.len() / b.len();
                let da = want[0].then(|| g.iter().enumerate().map(|(i, &gi)| gi * b[i / inner]).collect());
                let db = want[1].then(|| {
                    let mut db = vec![0.0; b.len()];
                    for (i, (&gi, &ai)) in g.iter().zip(a).enumerate() {
                        db[i / inner] += gi * ai;
                    }
                    db
                });
                vec![da, db]
            }
            Op::Add => {
                let blen = input(1).numel();
                let inner = g.len() / blen;
                let db = want[1].then(|| {
                    let mut db = vec![0.0; blen];
                    for (i, &gi) in g.iter().enumerate() {
                        db[i / inner] += gi;
                    }
                    db
                });
                vec![Some(g.to_vec()), db]
            }
            Op::Scale(s) => vec![Some(g.iter().map(|v| v * s).collect())],
            Op::AvgPool => {
                let x = input(0);
                let inner = x.numel() / g.len();
                vec![Some((0..x.numel()).map(|i| g[i / inner] / inner as f64).collect())]
            }
            Op::MaxPool { argmax } => {
                let mut dx = vec![0.0; input(0).numel()];
                for (gi, &a) in g.iter().zip(argmax) {
                    dx[a] += gi;
                }
                vec![Some(dx)]
            }
            Op::SliceRows { start } => {
                let s = input(0).shape();
                let (h, w) = (s[2], s[3]);
                let rows = node.value.shape()[2];
                let mut dx = vec![0.0; input(0).numel()];
                for plane in 0..s[0] * s[1] {
                    dx[(plane * h + start) * w..][..rows * w].copy_from_slice(&g[plane * rows * w..][..rows * w]);
                }
                vec![Some(dx)]
            }
            Op::Linear => {
                let (x, w) = (input(0), input(1));
                let (n, k) = (w.shape()[0], w.shape()[1]);
                let m = x.numel() / k;
                let dx = want[0].then(|| {
                    let mut dx = vec![0.0; m * k];
                    kernels::gemm(m, n, k, g, false, w.data(), false, &mut dx, false);
                    dx
                });
                let dw = want[1].then(|| {
                    let mut dw = vec![0.0; n * k];
                    kernels::gemm(n, m, k, g, true, x.data(), false, &mut dw, false);
                    dw
                });
                vec![dx, dw]
            }
            Op::Stack => {
                let count = node.inputs.len();
                let b = node.value.shape()[0];
                let inner = node.value.numel() / (b * count);
                (0..count)
                    .map(|j| {
                        want[j].then(|| {
                            let mut dx = Vec::with_capacity(b * inner);
                            for bi in 0..b {
                                dx.extend_from_slice(&g[(bi * count + j) * inner..][..inner]);
                            }
                            dx
                        })
                    })
                    .collect()
            }
            Op::Select(index) => {
                let s = input(0).shape();
                let inner: usize = s[2..].iter().product();
                let mut dx = vec![0.0; input(0).numel()];
                for bi in 0..s[0] {
                    dx[(bi * s[1] + index) * inner..][..inner].copy_from_slice(&g[bi * inner..][..inner]);
                }
                vec![Some(dx)]
            }
            Op::BatchMatMul => {
                let (a, b) = (input(0), input(1));
                let (bs, m, k, n) = (a.shape()[0], a.shape()[1], a.shape()[2], b.shape()[2]);
                let mut da = want[0].then(|| vec![0.0; a.numel()]);
                let mut db = want[1].then(|| vec![0.0; b.numel()]);
                for bi in 0..bs {
                    let gb = &g[bi * m * n..];
                    if let Some(da) = da.as_mut() {
                        kernels::gemm(m, n, k, gb, false, &b.data()[bi * k * n..], true, &mut da[bi * m * k..], false);
                    }
                    if let Some(db) = db.as_mut() {
                        kernels::gemm(k, m, n, &a.data()[bi * m * k..], true, gb, false, &mut db[bi * k * n..], false);
                    }
                }
                vec![da, db]
            }
            Op::TransposeLast => {
                let s = node.value.shape();
                vec![Some(transpose_bmn(g, s[0], s[1], s[2]))]
            }
            Op::RowL2Normalize { norms } => {
                let y = node.value.data();
                let n = *node.value.shape().last().unwrap();
                let mut dx = vec![0.0; y.len()];
                for (r, &norm) in norms.iter().enumerate() {
                    if norm < NORM_EPS {
                        continue;
                    }
                    let (yr, gr) = (&y[r * n..][..n], &g[r * n..][..n]);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for t in 0..n {
                        dx[r * n + t] = (gr[t] - yr[t] * dot) / norm;
                    }
                }
                vec![Some(dx)]
            }
            Op::Reshape => vec![Some(g.to_vec())],
            Op::Sum => vec![Some(vec![g[0]; input(0).numel()])],
            Op::CrossEntropy { labels, probs } => {
                let classes = input(0).shape()[1];
                let mut dx: Vec<f64> = probs.iter().map(|p| p * g[0]).collect();
                for (r, &y) in labels.iter().enumerate() {
                    dx[r * classes + y] -= g[0];
                }
                vec![Some(dx)]
            }
            Op::Triplet { active, dist } => {
                vec![Some(kernels::batch_hard_triplet_backward(g[0], input(0), active, dist))]
            }
        }
    }
}

fn transpose_bmn(x: &[f64], b: usize, m: usize, n: usize) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for bi in 0..b {
        for i in 0..m {
            for j in 0..n {
                y[bi * m * n + j * m + i] = x[bi * m * n + i * n + j];
            }
        }
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_has_gradient_two_x() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::scalar(3.0));
        let sq = g.mul(x, x).unwrap();
        let grads = g.backward(sq).unwrap();
        assert_eq!(grads.get("x").unwrap().item(), 6.0);
    }

    #[test]
    fn relu_of_negatives_has_zero_gradient() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::from_vec(vec![-1.0, -0.5, -3.0, 0.0]));
        let r = g.relu(x);
        let s = g.sum(r);
        let grads = g.backward(s).unwrap();
        assert!(grads.get("x").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constants_are_skipped() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::from_vec(vec![1.0, 2.0]));
        let p = g.param("p", Tensor::from_vec(vec![3.0, 4.0]));
        let m = g.mul(p, c).unwrap();
        let s = g.sum(m);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.len(), 1);
        assert_eq!(grads.get("p").unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn rewired_record_is_rejected() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::scalar(1.0));
        let y = g.scale(x, 2.0);
        let z = g.scale(y, 3.0);
        g.set_input(y, 0, z);
        assert!(matches!(g.backward(z), Err(PggaError::CyclicRecord { .. })));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::from_vec(vec![1.0, 2.0]));
        let y = g.scale(x, 2.0);
        assert!(g.backward(y).is_err());
    }

    #[test]
    fn max_pool_tie_goes_to_first_index() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::new(&[1, 1, 2, 2], vec![1.0, 5.0, 5.0, 2.0]).unwrap());
        let m = g.max_pool(x).unwrap();
        let s = g.sum(m);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get("x").unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::scalar(0.0));
        let r = g.relu(x);
        let grads = g.backward(r).unwrap();
        assert_eq!(grads.get("x").unwrap().item(), 0.0);
    }

    #[test]
    fn shared_name_accumulates() {
        let mut g = Graph::new();
        let a = g.param("w", Tensor::scalar(2.0));
        let b = g.param("w", Tensor::scalar(2.0));
        let y = g.mul(a, b).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get("w").unwrap().item(), 4.0);
    }

    #[test]
    fn broadcast_shape_errors_report_dimensions() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[3]));
        let err = g.mul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[3]"), "{err}");
    }
}
