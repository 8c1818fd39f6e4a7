//! Graph attention over the five local vectors: similarity edges, row
//! normalized adjacency and one contribution weight per node.

use super::config::SagaActivation;
use super::layers::Fwd;
use crate::autodiff::{Graph, NodeId};
use crate::error::{PggaError, Result};
use crate::tensor::Tensor;

pub const NUM_NODES: usize = 5;

/// `Φ_a`, `Φ_b` (`d×d`) and the projection `W` (`d`).
#[derive(Debug, Clone, PartialEq)]
pub struct SagaParams {
    pub phi_a: Tensor,
    pub phi_b: Tensor,
    pub w: Tensor,
}

impl SagaParams {
    pub fn dim(&self) -> usize {
        self.w.numel()
    }

    fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.phi_a.shape() != [d, d] || self.phi_b.shape() != [d, d] || self.w.rank() != 1 {
            return Err(PggaError::shape(
                "saga params",
                format!("{d}×{d} transforms and a length-{d} projection"),
                format!("{:?}, {:?}", self.phi_a.shape(), self.phi_b.shape()),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SagaOutput {
    pub theta: [f64; NUM_NODES],
    pub weighted: Vec<Tensor>,
    /// Adjacency rows left at zero because their edge row vanished.
    pub degenerate_rows: Vec<usize>,
}

/// Graph attention on `B×5×d` nodes with weight parameters bound under
/// `saga/`. Returns the weighted nodes and the `B×5` weights.
pub fn saga_forward(f: &mut Fwd, nodes: NodeId, act: SagaActivation) -> Result<(NodeId, NodeId, NodeId)> {
    let phi_a = f.p("saga/phi_a")?;
    let phi_b = f.p("saga/phi_b")?;
    let w = f.p("saga/w")?;
    saga_graph(&mut f.g, nodes, phi_a, phi_b, w, act)
}

/// Returns `(weighted, theta, adjacency)` nodes.
fn saga_graph(
    g: &mut Graph,
    nodes: NodeId,
    phi_a: NodeId,
    phi_b: NodeId,
    w: NodeId,
    act: SagaActivation,
) -> Result<(NodeId, NodeId, NodeId)> {
    let s = g.shape(nodes).to_vec();
    if s.len() != 3 || s[1] != NUM_NODES {
        return Err(PggaError::shape("saga", format!("B×{NUM_NODES}×d nodes"), format!("{s:?}")));
    }
    let pa = g.linear(nodes, phi_a)?;
    let pb = g.linear(nodes, phi_b)?;
    let pbt = g.transpose_last(pb)?;
    let e = g.batch_matmul(pa, pbt)?;
    let a = g.row_l2_normalize(e)?;
    let an = g.batch_matmul(a, nodes)?;
    let z = g.linear(an, w)?;
    let z = g.reshape(z, &[s[0], NUM_NODES])?;
    let theta = match act {
        SagaActivation::Logistic => g.logistic(z),
        SagaActivation::None => z,
    };
    let weighted = g.mul(nodes, theta)?;
    Ok((weighted, theta, a))
}

fn stack_nodes(v: &[Tensor]) -> Result<Tensor> {
    if v.len() != NUM_NODES {
        return Err(PggaError::shape("saga", format!("{NUM_NODES} nodes"), format!("{}", v.len())));
    }
    let d = v[0].numel();
    if v.iter().any(|t| t.rank() != 1 || t.numel() != d) {
        return Err(PggaError::shape("saga", format!("length-{d} node vectors"), "mixed lengths"));
    }
    Tensor::new(&[1, NUM_NODES, d], v.iter().flat_map(|t| t.data().iter().copied()).collect())
}

/// `E[i][j] = (Φ_a v_i)·(Φ_b v_j)`.
pub fn edge_matrix(v: &[Tensor], p: &SagaParams) -> Result<Tensor> {
    p.validate()?;
    let n = stack_nodes(v)?;
    let mut g = Graph::new();
    let n = g.constant(n);
    let pa = g.constant(p.phi_a.clone());
    let pb = g.constant(p.phi_b.clone());
    let a = g.linear(n, pa)?;
    let b = g.linear(n, pb)?;
    let bt = g.transpose_last(b)?;
    let e = g.batch_matmul(a, bt)?;
    g.value(e).reshape(&[NUM_NODES, NUM_NODES])
}

/// Row-wise L2 normalization; rows with norm below `1e-12` stay zero and
/// are reported.
pub fn adjacency(e: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    e.expect_rank("adjacency", 2)?;
    let mut g = Graph::new();
    let x = g.constant(e.clone());
    let a = g.row_l2_normalize(x)?;
    Ok((g.value(a).clone(), g.degenerate_rows(a)))
}

pub fn saga_apply(v: &[Tensor], p: &SagaParams, act: SagaActivation) -> Result<SagaOutput> {
    p.validate()?;
    let n = stack_nodes(v)?;
    let d = p.dim();
    let mut g = Graph::new();
    let nodes = g.constant(n);
    let pa = g.constant(p.phi_a.clone());
    let pb = g.constant(p.phi_b.clone());
    let w = g.constant(p.w.reshape(&[1, d])?);
    let (weighted, theta, a) = saga_graph(&mut g, nodes, pa, pb, w, act)?;
    let th = g.value(theta).data();
    Ok(SagaOutput {
        theta: std::array::from_fn(|i| th[i]),
        weighted: g.value(weighted).data().chunks(d).map(|c| Tensor::from_vec(c.to_vec())).collect(),
        degenerate_rows: g.degenerate_rows(a),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eye(d: usize) -> Tensor {
        let mut t = Tensor::zeros(&[d, d]);
        for i in 0..d {
            t.set(&[i, i], 1.0);
        }
        t
    }

    #[test]
    fn identity_transforms_on_orthonormal_nodes() {
        let p = SagaParams {
            phi_a: eye(5),
            phi_b: eye(5),
            w: Tensor::zeros(&[5]),
        };
        let v: Vec<Tensor> = (0..5).map(|i| eye(5).data()[i * 5..(i + 1) * 5].to_vec()).map(Tensor::from_vec).collect();
        let e = edge_matrix(&v, &p).unwrap();
        assert_eq!(e, eye(5));
    }

    #[test]
    fn scalar_nodes() {
        let p = SagaParams {
            phi_a: Tensor::ones(&[1, 1]),
            phi_b: Tensor::ones(&[1, 1]),
            w: Tensor::zeros(&[1]),
        };
        let v: Vec<Tensor> = [2.0, 3.0, 1.0, 1.0, 1.0].iter().map(|&x| Tensor::from_vec(vec![x])).collect();
        assert_eq!(edge_matrix(&v, &p).unwrap().at(&[0, 1]), 6.0);
    }

    #[test]
    fn adjacency_example() {
        let mut e = Tensor::zeros(&[5, 5]);
        e.set(&[0, 0], 3.0);
        e.set(&[0, 1], 4.0);
        let (a, flagged) = adjacency(&e).unwrap();
        assert!((a.at(&[0, 0]) - 0.6).abs() < 1e-15 && (a.at(&[0, 1]) - 0.8).abs() < 1e-15);
        assert_eq!(flagged, vec![1, 2, 3, 4]);
    }

    #[test]
    fn zero_projection_halves() {
        let d = 3;
        let p = SagaParams {
            phi_a: eye(d),
            phi_b: eye(d),
            w: Tensor::zeros(&[d]),
        };
        let v: Vec<Tensor> = (0..5).map(|i| Tensor::from_vec(vec![i as f64, 1.0, -2.0])).collect();
        let out = saga_apply(&v, &p, SagaActivation::Logistic).unwrap();
        assert_eq!(out.theta, [0.5; 5]);
        for (wv, vi) in out.weighted.iter().zip(&v) {
            assert_eq!(wv, &vi.map(|x| x * 0.5));
        }
    }

    #[test]
    fn wrong_node_count() {
        let p = SagaParams {
            phi_a: eye(2),
            phi_b: eye(2),
            w: Tensor::zeros(&[2]),
        };
        assert!(edge_matrix(&[Tensor::zeros(&[2])], &p).is_err());
    }
}
