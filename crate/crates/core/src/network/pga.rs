//! Shadow backbone and the global, coarse and fine branches.

use super::config::BackboneConfig;
use super::layers::{channel_attention, conv_bn_relu, gap_gmp, reduction, Fwd};
use crate::autodiff::NodeId;
use crate::error::{PggaError, Result};
use crate::pose::{downsample_mask, AttentionMask, NUM_PARTS};
use crate::tensor::Tensor;

/// Per-sample mask grids for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskBatch {
    /// `B×Hm×Wm`
    pub coarse: Tensor,
    /// `B×(Hm/2)×(Wm/2)`
    pub coarse_ds: Tensor,
    /// `B×13×Hm×Wm`
    pub fine: Tensor,
}

impl MaskBatch {
    /// All-ones masks, i.e. no pose guidance.
    pub fn ones(batch: usize, cfg: &BackboneConfig) -> Self {
        let (hm, wm) = cfg.shadow_size();
        Self {
            coarse: Tensor::ones(&[batch, hm, wm]),
            coarse_ds: Tensor::ones(&[batch, hm / 2, wm / 2]),
            fine: Tensor::ones(&[batch, NUM_PARTS, hm, wm]),
        }
    }

    pub fn from_masks(coarse: &[AttentionMask], fine: &[Vec<AttentionMask>]) -> Result<Self> {
        if coarse.is_empty() || coarse.len() != fine.len() {
            return Err(PggaError::shape("mask batch", "one coarse and 13 fine masks per sample", format!("{} and {}", coarse.len(), fine.len())));
        }
        let (hm, wm) = (coarse[0].rows(), coarse[0].cols());
        let b = coarse.len();
        let mut c = Vec::with_capacity(b * hm * wm);
        let mut ds = Vec::with_capacity(b * hm * wm / 4);
        let mut fd = Vec::with_capacity(b * NUM_PARTS * hm * wm);
        for (cm, fm) in coarse.iter().zip(fine) {
            if (cm.rows(), cm.cols()) != (hm, wm) || fm.len() != NUM_PARTS {
                return Err(PggaError::shape("mask batch", format!("{hm}×{wm} masks"), format!("{}×{}", cm.rows(), cm.cols())));
            }
            c.extend_from_slice(cm.grid.data());
            ds.extend_from_slice(downsample_mask(cm)?.data());
            for m in fm {
                if (m.rows(), m.cols()) != (hm, wm) {
                    return Err(PggaError::shape("mask batch", format!("{hm}×{wm} fine masks"), format!("{}×{}", m.rows(), m.cols())));
                }
                fd.extend_from_slice(m.grid.data());
            }
        }
        Ok(Self {
            coarse: Tensor::new(&[b, hm, wm], c)?,
            coarse_ds: Tensor::new(&[b, hm / 2, wm / 2], ds)?,
            fine: Tensor::new(&[b, NUM_PARTS, hm, wm], fd)?,
        })
    }

    pub fn batch(&self) -> usize {
        self.coarse.shape()[0]
    }
}

/// Repeats a `B×h×w` grid across `c` channels.
pub fn expand_mask(mask: &Tensor, c: usize) -> Tensor {
    let s = mask.shape();
    let plane = s[1] * s[2];
    let mut data = Vec::with_capacity(s[0] * c * plane);
    for m in mask.data().chunks(plane) {
        for _ in 0..c {
            data.extend_from_slice(m);
        }
    }
    Tensor::new(&[s[0], c, s[1], s[2]], data).expect("mask expansion")
}

/// Gives each channel the fine mask of its keypoint group.
pub fn expand_groups(fine: &Tensor, alloc: &[usize]) -> Result<Tensor> {
    let s = fine.shape();
    if s.len() != 4 || s[1] != NUM_PARTS || alloc.len() != NUM_PARTS {
        return Err(PggaError::shape("expand_groups", "B×13×h×w masks and 13 groups", format!("{s:?}, {} groups", alloc.len())));
    }
    let plane = s[2] * s[3];
    let c: usize = alloc.iter().sum();
    let mut data = Vec::with_capacity(s[0] * c * plane);
    for sample in fine.data().chunks(NUM_PARTS * plane) {
        for (g, &n) in alloc.iter().enumerate() {
            for _ in 0..n {
                data.extend_from_slice(&sample[g * plane..(g + 1) * plane]);
            }
        }
    }
    Tensor::new(&[s[0], c, s[2], s[3]], data)
}

/// Toy backbone: three stride-2 stages, `B×3×H×W` → `B×C_s×H/8×W/8`.
pub fn shadow_forward(f: &mut Fwd, images: NodeId, cfg: &BackboneConfig) -> Result<NodeId> {
    let s = f.g.shape(images).to_vec();
    if s.len() != 4 || s[1] != 3 || !s[2].is_multiple_of(16) || !s[3].is_multiple_of(16) || s[2] != cfg.image_h || s[3] != cfg.image_w {
        return Err(PggaError::shape(
            "shadow_forward",
            format!("B×3×{}×{} with sides divisible by 16", cfg.image_h, cfg.image_w),
            format!("{s:?}"),
        ));
    }
    let mut x = images;
    for stage in 1..=3 {
        x = conv_bn_relu(f, x, &format!("shadow/s{stage}"), 2)?;
    }
    Ok(x)
}

/// `f_2(f_1(x))` with optional attention after each stage.
fn branch_stages(f: &mut Fwd, x: NodeId, name: &str, att: bool, mid_mask: Option<NodeId>) -> Result<NodeId> {
    let mut t = conv_bn_relu(f, x, &format!("{name}/f1"), 2)?;
    if att {
        t = channel_attention(f, t, &format!("{name}/att1"))?;
    }
    if let Some(m) = mid_mask {
        t = f.g.mul(t, m)?;
    }
    let mut p = conv_bn_relu(f, t, &format!("{name}/f2"), 1)?;
    if att {
        p = channel_attention(f, p, &format!("{name}/att2"))?;
    }
    Ok(p)
}

/// `R(GAP + GMP)` of the global branch's features.
pub fn global_branch(f: &mut Fwd, p_ini: NodeId) -> Result<NodeId> {
    let p = conv_bn_relu(f, p_ini, "global/f1", 2)?;
    let p = conv_bn_relu(f, p, "global/f2", 1)?;
    let v = gap_gmp(f, p)?;
    reduction(f, v, "global/red")
}

/// Global vector plus GAP-pooled local vectors of consecutive row grids.
fn pool_grids(f: &mut Fwd, p: NodeId, name: &str, bounds: &[usize]) -> Result<(NodeId, Vec<NodeId>)> {
    let v = gap_gmp(f, p)?;
    let global = reduction(f, v, &format!("{name}/red_g"))?;
    let h = f.g.shape(p)[2];
    let mut edges = vec![0];
    edges.extend_from_slice(bounds);
    edges.push(h);
    let mut locals = Vec::with_capacity(edges.len() - 1);
    for (i, w) in edges.windows(2).enumerate() {
        let grid = f.g.slice_rows(p, w[0], w[1])?;
        let v = f.g.avg_pool(grid)?;
        locals.push(reduction(f, v, &format!("{name}/red_l{i}"))?);
    }
    Ok((global, locals))
}

/// Coarse branch: mask the shadow features, run both stages with the
/// downsampled mask in between, then pool a global and two local vectors.
pub fn coarse_branch(
    f: &mut Fwd,
    p_ini: NodeId,
    masks: &MaskBatch,
    cfg: &BackboneConfig,
    att: bool,
) -> Result<(NodeId, [NodeId; 2])> {
    let s = f.g.shape(p_ini).to_vec();
    if masks.coarse.shape() != [s[0], s[2], s[3]] {
        return Err(PggaError::shape("coarse_branch", format!("{:?} mask", [s[0], s[2], s[3]]), format!("{:?}", masks.coarse.shape())));
    }
    let m = f.constant(expand_mask(&masks.coarse, s[1]));
    let x = f.g.mul(p_ini, m)?;
    let mid = f.constant(expand_mask(&masks.coarse_ds, cfg.branch_channels / 2));
    let p = branch_stages(f, x, "coarse", att, Some(mid))?;
    let (g, l) = pool_grids(f, p, "coarse", &[cfg.coarse_boundary()])?;
    Ok((g, [l[0], l[1]]))
}

/// Multiplies each channel group of `p_ini` by its keypoint's fine mask.
pub fn assemble_fine_input(f: &mut Fwd, p_ini: NodeId, masks: &MaskBatch, alloc: &[usize]) -> Result<NodeId> {
    let c = f.g.shape(p_ini)[1];
    if alloc.iter().sum::<usize>() != c {
        return Err(PggaError::shape("assemble_fine_input", format!("allocation summing to {c}"), format!("{alloc:?}")));
    }
    let m = expand_groups(&masks.fine, alloc)?;
    if m.shape() != f.g.shape(p_ini) {
        return Err(PggaError::shape("assemble_fine_input", format!("{:?}", f.g.shape(p_ini)), format!("{:?}", m.shape())));
    }
    let m = f.constant(m);
    f.g.mul(p_ini, m)
}

/// Fine branch: both stages on the group-masked input, then a global and
/// three local vectors.
pub fn fine_branch(f: &mut Fwd, p_ini_f: NodeId, cfg: &BackboneConfig, att: bool) -> Result<(NodeId, [NodeId; 3])> {
    let p = branch_stages(f, p_ini_f, "fine", att, None)?;
    let (g, l) = pool_grids(f, p, "fine", &cfg.fine_boundaries())?;
    Ok((g, [l[0], l[1], l[2]]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_follow_allocation() {
        let mut fine = Tensor::zeros(&[1, NUM_PARTS, 1, 1]);
        for n in 0..NUM_PARTS {
            fine.set(&[0, n, 0, 0], n as f64);
        }
        let alloc = [2, 1, 0, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1];
        let e = expand_groups(&fine, &alloc).unwrap();
        assert_eq!(&e.data()[..5], &[0.0, 0.0, 1.0, 3.0, 4.0]);
        assert_eq!(e.shape(), &[1, 13, 1, 1]);
    }

    #[test]
    fn expand_repeats_planes() {
        let m = Tensor::new(&[2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let e = expand_mask(&m, 2);
        assert_eq!(e.data(), &[1.0, 2.0, 1.0, 2.0, 3.0, 4.0, 3.0, 4.0]);
    }
}
