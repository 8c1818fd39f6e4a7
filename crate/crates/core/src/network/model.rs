use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{Ablation, BackboneConfig};
use super::layers::Fwd;
use super::pga::{assemble_fine_input, coarse_branch, fine_branch, global_branch, shadow_forward, MaskBatch};
use super::saga::{saga_forward, NUM_NODES};
use crate::autodiff::{BnState, Graph, Mode, NodeId, Params};
use crate::error::{PggaError, Result};
use crate::pose::{coarse_mask, extract_keypoints, fine_masks, Heatmap, MaskParams};
use crate::tensor::Tensor;

/// Number of pooled vectors per image: three global, five local.
pub const NUM_VECTORS: usize = 8;

#[derive(Debug, Clone, Copy)]
enum Init {
    /// Normal with std `sqrt(gain / fan_in)`.
    Normal { gain: f64, fan_in: usize },
    Const(f64),
}

/// The full network with its classifier heads and batch-norm state.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub cfg: BackboneConfig,
    pub ablation: Ablation,
    pub num_ids: usize,
    pub params: Params,
    pub bn: BTreeMap<String, BnState>,
    mode: Mode,
}

fn param_specs(cfg: &BackboneConfig, num_ids: usize) -> (Vec<(String, Vec<usize>, Init)>, Vec<(String, usize)>) {
    let mut p = Vec::new();
    let mut bn = Vec::new();
    let conv = |p: &mut Vec<_>, bn: &mut Vec<(String, usize)>, name: &str, cin: usize, cout: usize| {
        p.push((
            format!("{name}/conv"),
            vec![cout, cin, 3, 3],
            Init::Normal { gain: 2.0, fan_in: 9 * cin },
        ));
        bn.push((format!("{name}/bn"), cout));
    };
    let (cs, cb, d) = (cfg.shadow_channels, cfg.branch_channels, cfg.reduced_dim);
    conv(&mut p, &mut bn, "shadow/s1", 3, cs / 4);
    conv(&mut p, &mut bn, "shadow/s2", cs / 4, cs / 2);
    conv(&mut p, &mut bn, "shadow/s3", cs / 2, cs);
    let red = |p: &mut Vec<_>, bn: &mut Vec<(String, usize)>, name: String| {
        p.push((format!("{name}/w"), vec![d, cb], Init::Normal { gain: 2.0, fan_in: cb }));
        bn.push((format!("{name}/bn"), d));
    };
    conv(&mut p, &mut bn, "global/f1", cs, cb / 2);
    conv(&mut p, &mut bn, "global/f2", cb / 2, cb);
    red(&mut p, &mut bn, "global/red".into());
    for (branch, locals) in [("coarse", 2), ("fine", 3)] {
        conv(&mut p, &mut bn, &format!("{branch}/f1"), cs, cb / 2);
        conv(&mut p, &mut bn, &format!("{branch}/f2"), cb / 2, cb);
        for (att, c) in [("att1", cb / 2), ("att2", cb)] {
            let h = cfg.attention_hidden(c);
            p.push((format!("{branch}/{att}/w1"), vec![h, c], Init::Normal { gain: 2.0, fan_in: c }));
            p.push((format!("{branch}/{att}/w2"), vec![c, h], Init::Normal { gain: 1.0, fan_in: h }));
        }
        red(&mut p, &mut bn, format!("{branch}/red_g"));
        for i in 0..locals {
            red(&mut p, &mut bn, format!("{branch}/red_l{i}"));
        }
    }
    p.push(("saga/phi_a".into(), vec![d, d], Init::Normal { gain: 1.0, fan_in: d }));
    p.push(("saga/phi_b".into(), vec![d, d], Init::Normal { gain: 1.0, fan_in: d }));
    p.push(("saga/w".into(), vec![1, d], Init::Normal { gain: 1.0, fan_in: d }));
    for k in 0..NUM_VECTORS {
        p.push((format!("head/{k}"), vec![num_ids, d], Init::Normal { gain: 1e-4, fan_in: 1 }));
    }
    for (name, c) in &bn {
        p.push((format!("{name}/scale"), vec![*c], Init::Const(1.0)));
        p.push((format!("{name}/shift"), vec![*c], Init::Const(0.0)));
    }
    (p, bn)
}

/// Output nodes of one recorded forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Outputs {
    /// `p_global`, `p_g_c`, `p_g_f`, each `B×d`.
    pub globals: [NodeId; 3],
    /// The five local vectors stacked `B×5×d`, before weighting.
    pub locals: NodeId,
    /// `θ_i·v_i`, `B×5×d`.
    pub weighted: NodeId,
    /// `B×5` weights; `None` when graph attention is disabled.
    pub theta: Option<NodeId>,
}

impl Outputs {
    /// The eight vectors fed to the classifier heads, each `B×d`.
    pub fn head_inputs(&self, g: &mut Graph) -> Result<Vec<NodeId>> {
        let mut v = self.globals.to_vec();
        for i in 0..NUM_NODES {
            v.push(g.select(self.weighted, i)?);
        }
        Ok(v)
    }

    /// Concatenated descriptors, `B×8d`, in the order
    /// `[p_global, p_g_c, p_g_f, θ1v1 … θ5v5]`.
    pub fn descriptors(&self, g: &Graph) -> Tensor {
        let s = g.shape(self.locals);
        let (b, d) = (s[0], s[2]);
        let mut out = Vec::with_capacity(b * NUM_VECTORS * d);
        for i in 0..b {
            for &gid in &self.globals {
                out.extend_from_slice(&g.value(gid).data()[i * d..(i + 1) * d]);
            }
            out.extend_from_slice(&g.value(self.weighted).data()[i * NUM_NODES * d..(i + 1) * NUM_NODES * d]);
        }
        Tensor::new(&[b, NUM_VECTORS * d], out).expect("descriptor size")
    }

    /// Per-sample graph attention weights (all ones when disabled).
    pub fn thetas(&self, g: &Graph) -> Vec<[f64; NUM_NODES]> {
        match self.theta {
            Some(t) => g
                .value(t)
                .data()
                .chunks(NUM_NODES)
                .map(|c| std::array::from_fn(|i| c[i]))
                .collect(),
            None => vec![[1.0; NUM_NODES]; g.shape(self.locals)[0]],
        }
    }
}

/// A forward context together with its outputs.
pub struct Forward<'a> {
    pub f: Fwd<'a>,
    pub out: Outputs,
}

impl Forward<'_> {
    pub fn descriptors(&self) -> Tensor {
        self.out.descriptors(&self.f.g)
    }

    pub fn thetas(&self) -> Vec<[f64; NUM_NODES]> {
        self.out.thetas(&self.f.g)
    }

    /// Batch statistics of every training-mode batch norm layer.
    pub fn bn_stats(&self) -> Vec<(String, Vec<f64>, Vec<f64>)> {
        self.f
            .bn_nodes
            .iter()
            .filter_map(|(name, id)| {
                self.f
                    .g
                    .batch_stats(*id)
                    .map(|(m, v)| (name.clone(), m.to_vec(), v.to_vec()))
            })
            .collect()
    }
}

impl Model {
    pub fn new(cfg: BackboneConfig, ablation: Ablation, num_ids: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if num_ids < 2 {
            return Err(PggaError::Config(format!("need at least 2 identities, got {num_ids}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (specs, bn_layers) = param_specs(&cfg, num_ids);
        let mut params = Params::new();
        for (name, shape, init) in specs {
            let t = match init {
                Init::Normal { gain, fan_in } => Tensor::rand_normal(&shape, (gain / fan_in as f64).sqrt(), &mut rng),
                Init::Const(c) => Tensor::full(&shape, c),
            };
            params.insert(name, t);
        }
        let bn = bn_layers.into_iter().map(|(n, c)| (n, BnState::new(c))).collect();
        Ok(Self {
            cfg,
            ablation,
            num_ids,
            params,
            bn,
            mode: Mode::Train,
        })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    /// Whether every batch norm layer has running statistics.
    pub fn bn_ready(&self) -> bool {
        self.bn.values().all(|s| s.populated)
    }

    pub fn descriptor_len(&self) -> usize {
        self.cfg.descriptor_len()
    }

    /// Attention masks for a batch of heatmaps, or all ones when pose
    /// guidance is disabled.
    pub fn masks_for(&self, heatmaps: &[&Heatmap], mp: &MaskParams) -> Result<MaskBatch> {
        if !self.ablation.pose_masks {
            return Ok(MaskBatch::ones(heatmaps.len(), &self.cfg));
        }
        let (hm, wm) = self.cfg.shadow_size();
        let mut coarse = Vec::with_capacity(heatmaps.len());
        let mut fine = Vec::with_capacity(heatmaps.len());
        for h in heatmaps {
            if (h.rows(), h.cols()) != (hm, wm) {
                return Err(PggaError::shape("heatmap", format!("13×{hm}×{wm}"), format!("13×{}×{}", h.rows(), h.cols())));
            }
            let kps = extract_keypoints(h);
            coarse.push(coarse_mask(&kps, mp));
            fine.push(fine_masks(&kps, mp));
        }
        MaskBatch::from_masks(&coarse, &fine)
    }

    /// Records a forward pass over `B×3×H×W` images in the given mode.
    pub fn forward(&self, images: &Tensor, masks: &MaskBatch, mode: Mode) -> Result<Forward<'_>> {
        let mut f = Fwd::new(&self.params, &self.bn, mode);
        let out = self.record(&mut f, images, masks)?;
        Ok(Forward { f, out })
    }

    /// Records the network into `f`, whose parameters may differ from the
    /// model's own.
    pub fn record(&self, f: &mut Fwd, images: &Tensor, masks: &MaskBatch) -> Result<Outputs> {
        let s = images.shape();
        if s.len() != 4 || s[2] != self.cfg.image_h || s[3] != self.cfg.image_w {
            return Err(PggaError::shape(
                "model input",
                format!("B×3×{}×{}", self.cfg.image_h, self.cfg.image_w),
                format!("{s:?}"),
            ));
        }
        if masks.batch() != s[0] {
            return Err(PggaError::shape("model masks", format!("batch {}", s[0]), format!("{}", masks.batch())));
        }
        let x = f.constant(images.clone());
        let p_ini = shadow_forward(f, x, &self.cfg)?;
        let att = self.ablation.channel_att;
        let p_global = global_branch(f, p_ini)?;
        let (p_g_c, l_c) = coarse_branch(f, p_ini, masks, &self.cfg, att)?;
        let p_ini_f = assemble_fine_input(f, p_ini, masks, &self.cfg.alloc())?;
        let (p_g_f, l_f) = fine_branch(f, p_ini_f, &self.cfg, att)?;
        let locals = f.g.stack(&[l_c[0], l_c[1], l_f[0], l_f[1], l_f[2]])?;
        let (weighted, theta) = if self.ablation.saga {
            let (w, t, _) = saga_forward(f, locals, self.cfg.saga_activation)?;
            (w, Some(t))
        } else {
            (locals, None)
        };
        Ok(Outputs {
            globals: [p_global, p_g_c, p_g_f],
            locals,
            weighted,
            theta,
        })
    }

    /// Folds the batch statistics of a training forward into the running
    /// statistics.
    pub fn update_bn(&mut self, stats: &[(String, Vec<f64>, Vec<f64>)]) {
        for (name, m, v) in stats {
            if let Some(s) = self.bn.get_mut(name) {
                s.update(m, v);
            }
        }
    }

    /// Descriptors (`B×8d`) and graph attention weights of a batch; the
    /// model must be in eval mode.
    pub fn extract(&self, images: &Tensor, masks: &MaskBatch) -> Result<(Tensor, Vec<[f64; NUM_NODES]>)> {
        if self.mode != Mode::Eval {
            return Err(PggaError::TrainMode);
        }
        let fwd = self.forward(images, masks, Mode::Eval)?;
        Ok((fwd.descriptors(), fwd.thetas()))
    }
}
