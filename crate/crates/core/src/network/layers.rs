use std::collections::{BTreeMap, HashMap};

use crate::autodiff::{BnState, Graph, Mode, NodeId, Params};
use crate::error::{PggaError, Result};
use crate::tensor::Tensor;

/// One recorded forward pass: the graph, parameter bindings and the batch
/// norm layers it touched.
pub struct Fwd<'a> {
    pub g: Graph,
    params: &'a Params,
    bn: &'a BTreeMap<String, BnState>,
    mode: Mode,
    bound: HashMap<String, NodeId>,
    /// Training-mode batch norm nodes, for updating running statistics.
    pub bn_nodes: Vec<(String, NodeId)>,
}

impl<'a> Fwd<'a> {
    pub fn new(params: &'a Params, bn: &'a BTreeMap<String, BnState>, mode: Mode) -> Self {
        Self {
            g: Graph::new(),
            params,
            bn,
            mode,
            bound: HashMap::new(),
            bn_nodes: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// The node of parameter `name`, bound once per record.
    pub fn p(&mut self, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.bound.get(name) {
            return Ok(id);
        }
        let id = self.params.bind(&mut self.g, name)?;
        self.bound.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.g.constant(t)
    }

    /// Batch norm with parameters `{name}/scale`, `{name}/shift`.
    pub fn batch_norm(&mut self, x: NodeId, name: &str) -> Result<NodeId> {
        let scale = self.p(&format!("{name}/scale"))?;
        let shift = self.p(&format!("{name}/shift"))?;
        match self.mode {
            Mode::Train => {
                let y = self.g.batch_norm(x, scale, shift, None)?;
                self.bn_nodes.push((name.to_string(), y));
                Ok(y)
            }
            Mode::Eval => {
                let st = self
                    .bn
                    .get(name)
                    .ok_or_else(|| PggaError::InvalidArgument(format!("unknown batch norm layer `{name}`")))?;
                if !st.populated {
                    return Err(PggaError::BnNotReady(name.to_string()));
                }
                self.g.batch_norm(x, scale, shift, Some((&st.mean, &st.var)))
            }
        }
    }
}

/// 3×3 convolution (pad 1), batch norm and relu; weights `{name}/conv`.
pub fn conv_bn_relu(f: &mut Fwd, x: NodeId, name: &str, stride: usize) -> Result<NodeId> {
    let w = f.p(&format!("{name}/conv"))?;
    let y = f.g.conv2d(x, w, stride, 1)?;
    let y = f.batch_norm(y, &format!("{name}/bn"))?;
    Ok(f.g.relu(y))
}

/// `GAP(x) + GMP(x)`, `B×C×h×w` → `B×C`.
pub fn gap_gmp(f: &mut Fwd, x: NodeId) -> Result<NodeId> {
    let a = f.g.avg_pool(x)?;
    let m = f.g.max_pool(x)?;
    f.g.add(a, m)
}

/// Channel weights `logistic(M(GAP(x)) + M(GMP(x)))` with the shared map
/// `M(v) = W2·relu(W1·v)`; returns the `B×C` weights.
pub fn attention_weights(f: &mut Fwd, x: NodeId, name: &str) -> Result<NodeId> {
    let w1 = f.p(&format!("{name}/w1"))?;
    let w2 = f.p(&format!("{name}/w2"))?;
    let branch = |f: &mut Fwd, v: NodeId| -> Result<NodeId> {
        let h = f.g.linear(v, w1)?;
        let h = f.g.relu(h);
        f.g.linear(h, w2)
    };
    let a = f.g.avg_pool(x)?;
    let a = branch(f, a)?;
    let m = f.g.max_pool(x)?;
    let m = branch(f, m)?;
    let s = f.g.add(a, m)?;
    Ok(f.g.logistic(s))
}

/// Rescales each channel of `x` by its attention weight.
pub fn channel_attention(f: &mut Fwd, x: NodeId, name: &str) -> Result<NodeId> {
    let s = attention_weights(f, x, name)?;
    f.g.mul(x, s)
}

/// `relu(BN(W·v))`, `B×C` → `B×d`; weights `{name}/w`, batch norm `{name}/bn`.
pub fn reduction(f: &mut Fwd, v: NodeId, name: &str) -> Result<NodeId> {
    let w = f.p(&format!("{name}/w"))?;
    let y = f.g.linear(v, w)?;
    let y = f.batch_norm(y, &format!("{name}/bn"))?;
    Ok(f.g.relu(y))
}
