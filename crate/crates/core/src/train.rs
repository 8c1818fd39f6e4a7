//! Run configuration, the PK-batched training loop and evaluation.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{sgd_step, Mode, OptimizerState};
use crate::checkpoint;
use crate::data::{erase_augment, flip_augment, generate_dataset, held_out, DatasetConfig, EraseParams, PkSampler, Sample};
use crate::error::{PggaError, Result};
use crate::eval::{distance_matrix, EvalReport, Meta};
use crate::losses::{network_loss, LossConfig};
use crate::network::config::{parse_num, parse_switch, switch_str};
use crate::network::{Ablation, BackboneConfig, MaskBatch, Model};
use crate::pose::MaskParams;
use crate::tensor::Tensor;

/// Environment variable overriding the configured seed.
pub const SEED_ENV: &str = "PGGA_SEED";

/// Prefix of the parameters trained at `lr_backbone`.
pub const BACKBONE_PREFIX: &str = "shadow/";

/// Everything a training or evaluation run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    pub masks: MaskParams,
    pub loss: LossConfig,
    pub data: DatasetConfig,
    /// Dataset seed; follows `seed` when unset.
    pub dataset_seed: Option<u64>,
    pub ablation: Ablation,
    pub lr_backbone: f64,
    pub lr_other: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Also checkpoint every this many epochs; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub seed: u64,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub report: PathBuf,
    pub flip: bool,
    pub erase: bool,
    /// Held-out renders per identity used as queries.
    pub eval_renders: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            masks: MaskParams::default(),
            loss: LossConfig::default(),
            data: DatasetConfig::default(),
            dataset_seed: None,
            ablation: Ablation::default(),
            lr_backbone: 0.01,
            lr_other: 0.001,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 300,
            checkpoint_every: 0,
            seed: 0,
            checkpoint: PathBuf::from("pgga.ckpt"),
            log: PathBuf::from("train_log.csv"),
            report: PathBuf::from("eval.csv"),
            flip: true,
            erase: true,
            eval_renders: 4,
        }
    }
}

impl RunConfig {
    /// Parses `key = value` lines; `#` starts a comment. Unknown and
    /// repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| PggaError::Config(format!("line {}: expected key=value, got `{line}`", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(PggaError::Config(format!("line {}: duplicate key `{k}`", n + 1)));
            }
            cfg.apply(k, v).map_err(|e| match e {
                PggaError::Config(m) => PggaError::Config(format!("line {}: {m}", n + 1)),
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, key: &str, v: &str) -> Result<()> {
        if self.backbone.apply(key, v)? || self.ablation.apply(key, v)? {
            return Ok(());
        }
        if key == "dataset_seed" {
            self.dataset_seed = Some(parse_num(key, v)?);
            return Ok(());
        }
        if self.data.apply(key, v)? {
            return Ok(());
        }
        match key {
            "omega" => self.masks.omega = parse_num(key, v)?,
            "alpha" => self.masks.alpha = parse_num(key, v)?,
            "beta" => self.masks.beta = parse_num(key, v)?,
            "margin" => self.loss.margin = parse_num(key, v)?,
            "tau" => self.loss.tau = parse_num(key, v)?,
            "p" => self.loss.p = parse_num(key, v)?,
            "k" => self.loss.k = parse_num(key, v)?,
            "lr_backbone" => self.lr_backbone = parse_num(key, v)?,
            "lr_other" => self.lr_other = parse_num(key, v)?,
            "momentum" => self.momentum = parse_num(key, v)?,
            "weight_decay" => self.weight_decay = parse_num(key, v)?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "checkpoint" => self.checkpoint = PathBuf::from(v),
            "log" => self.log = PathBuf::from(v),
            "report" => self.report = PathBuf::from(v),
            "random_flip" => self.flip = parse_switch(key, v)?,
            "random_erase" => self.erase = parse_switch(key, v)?,
            "eval_renders" => self.eval_renders = parse_num(key, v)?,
            _ => return Err(PggaError::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.masks.validate()?;
        self.loss.validate()?;
        self.dataset().validate()?;
        for (name, v) in [("lr_backbone", self.lr_backbone), ("lr_other", self.lr_other), ("weight_decay", self.weight_decay)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(PggaError::Config(format!("{name} must be ≥ 0, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(PggaError::Config(format!("momentum must lie in [0,1), got {}", self.momentum)));
        }
        if self.data.num_identities < self.loss.p || self.data.samples_per_identity < self.loss.k {
            return Err(PggaError::Config(format!(
                "P={} K={} batches need that many identities and renders, dataset has {}×{}",
                self.loss.p, self.loss.k, self.data.num_identities, self.data.samples_per_identity
            )));
        }
        Ok(())
    }

    /// Reads a config file, applies the seed override and resolves relative
    /// paths against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| PggaError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        cfg.apply_env()?;
        if let Some(dir) = path.parent() {
            cfg.resolve_paths(dir);
        }
        Ok(cfg)
    }

    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = parse_num(SEED_ENV, &v)?;
        }
        Ok(())
    }

    pub fn resolve_paths(&mut self, dir: &Path) {
        for p in [&mut self.checkpoint, &mut self.log, &mut self.report] {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
    }

    /// The dataset settings with image size and seed filled in.
    pub fn dataset(&self) -> DatasetConfig {
        DatasetConfig {
            image_h: self.backbone.image_h,
            image_w: self.backbone.image_w,
            seed: self.dataset_seed.unwrap_or(self.seed),
            ..self.data.clone()
        }
    }

    /// Every key with its value, one `key=value` per line.
    pub fn to_text(&self) -> String {
        let mut kv = self.backbone.to_kv();
        kv.extend(self.ablation.to_kv());
        kv.extend(
            self.data
                .to_kv()
                .into_iter()
                .filter(|(k, _)| k != "dataset_seed"),
        );
        kv.push(("dataset_seed".into(), self.dataset().seed.to_string()));
        kv.extend([
            ("omega".into(), self.masks.omega.to_string()),
            ("alpha".into(), self.masks.alpha.to_string()),
            ("beta".into(), self.masks.beta.to_string()),
            ("margin".into(), self.loss.margin.to_string()),
            ("tau".into(), self.loss.tau.to_string()),
            ("p".into(), self.loss.p.to_string()),
            ("k".into(), self.loss.k.to_string()),
            ("lr_backbone".into(), self.lr_backbone.to_string()),
            ("lr_other".into(), self.lr_other.to_string()),
            ("momentum".into(), self.momentum.to_string()),
            ("weight_decay".into(), self.weight_decay.to_string()),
            ("epochs".into(), self.epochs.to_string()),
            ("checkpoint_every".into(), self.checkpoint_every.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("checkpoint".into(), self.checkpoint.display().to_string()),
            ("log".into(), self.log.display().to_string()),
            ("report".into(), self.report.display().to_string()),
            ("random_flip".into(), switch_str(self.flip)),
            ("random_erase".into(), switch_str(self.erase)),
            ("eval_renders".into(), self.eval_renders.to_string()),
        ]);
        let mut s = String::new();
        for (k, v) in kv {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn optimizer(&self) -> Result<OptimizerState> {
        Ok(OptimizerState::new(self.lr_other, self.momentum, self.weight_decay)?.with_group(BACKBONE_PREFIX, self.lr_backbone))
    }

    pub fn build_model(&self) -> Result<Model> {
        Model::new(self.backbone.clone(), self.ablation, self.data.num_identities, self.seed)
    }
}

/// Path of the config saved next to a checkpoint.
pub fn config_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_os_string();
    s.push(".cfg");
    PathBuf::from(s)
}

/// Mean loss components over one epoch's batches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub l_id: f64,
    pub l_tri: f64,
    pub total: f64,
}

pub const LOG_HEADER: &str = "epoch,l_id,l_tri,total,lr_backbone,lr_other";

/// Stacks sample images into a `B×3×H×W` batch.
pub fn stack_images(samples: &[Sample]) -> Result<Tensor> {
    let s = samples[0].image.shape().to_vec();
    let mut data = Vec::with_capacity(samples.len() * samples[0].image.numel());
    for x in samples {
        if x.image.shape() != s.as_slice() {
            return Err(PggaError::shape("image batch", format!("{s:?}"), format!("{:?}", x.image.shape())));
        }
        data.extend_from_slice(x.image.data());
    }
    Tensor::new(&[samples.len(), s[0], s[1], s[2]], data)
}

/// Model, optimizer and training data of one run.
pub struct Trainer {
    pub cfg: RunConfig,
    pub model: Model,
    pub opt: OptimizerState,
    /// Completed epochs.
    pub epoch: usize,
    pub samples: Vec<Sample>,
    sampler: PkSampler,
}

const TRAIN_STREAM: u64 = 0x5452_4149_4e00;

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let samples = generate_dataset(&cfg.dataset())?;
        let labels: Vec<usize> = samples.iter().map(|s| s.id).collect();
        let sampler = PkSampler::new(&labels, cfg.loss.p, cfg.loss.k)?;
        Ok(Self {
            model: cfg.build_model()?,
            opt: cfg.optimizer()?,
            epoch: 0,
            samples,
            sampler,
            cfg,
        })
    }

    /// Continues from a checkpoint written by an earlier run.
    pub fn resume(cfg: RunConfig, ckpt: &Path) -> Result<Self> {
        let mut t = Self::new(cfg)?;
        t.epoch = checkpoint::load(ckpt, &mut t.model, Some(&mut t.opt))?;
        Ok(t)
    }

    fn epoch_rng(&self, epoch: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(TRAIN_STREAM ^ epoch as u64);
        rng
    }

    /// One SGD step on the given batch; returns `(l_id, l_tri, total)`.
    pub fn step(&mut self, batch: &[Sample]) -> Result<(f64, f64, f64)> {
        let images = stack_images(batch)?;
        let heatmaps: Vec<_> = batch.iter().map(|s| &s.heatmap).collect();
        let labels: Vec<usize> = batch.iter().map(|s| s.id).collect();
        let masks = self.model.masks_for(&heatmaps, &self.cfg.masks)?;
        let (grads, values, stats) = {
            let mut fwd = self.model.forward(&images, &masks, Mode::Train)?;
            let nodes = network_loss(&mut fwd.f, &fwd.out, &labels, &self.cfg.loss)?;
            let g = &fwd.f.g;
            let values = (g.value(nodes.id).item(), g.value(nodes.tri).item(), g.value(nodes.total).item());
            if !values.2.is_finite() {
                return Err(PggaError::NonFinite(format!("training loss at epoch {}", self.epoch + 1)));
            }
            (g.backward(nodes.total)?, values, fwd.bn_stats())
        };
        sgd_step(&mut self.model.params, &grads, &mut self.opt)?;
        self.model.update_bn(&stats);
        Ok(values)
    }

    pub fn train_epoch(&mut self) -> Result<EpochStats> {
        let mut rng = self.epoch_rng(self.epoch + 1);
        let batches = self.sampler.epoch(&mut rng);
        let erase = EraseParams {
            enabled: self.cfg.erase,
            ..Default::default()
        };
        let mut sums = (0.0, 0.0, 0.0);
        for idx in &batches {
            let mut batch = Vec::with_capacity(idx.len());
            for &i in idx {
                let mut s = self.samples[i].clone();
                if self.cfg.flip && rng.random_bool(0.5) {
                    s = flip_augment(&s);
                }
                batch.push(erase_augment(&s, &erase, &mut rng).0);
            }
            let (a, b, c) = self.step(&batch)?;
            sums = (sums.0 + a, sums.1 + b, sums.2 + c);
        }
        self.epoch += 1;
        let n = batches.len().max(1) as f64;
        Ok(EpochStats {
            epoch: self.epoch,
            l_id: sums.0 / n,
            l_tri: sums.1 / n,
            total: sums.2 / n,
        })
    }

    pub fn log_line(&self, s: &EpochStats) -> String {
        format!(
            "{},{},{},{},{},{}",
            s.epoch, s.l_id, s.l_tri, s.total, self.cfg.lr_backbone, self.cfg.lr_other
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.model, Some(&self.opt), self.epoch)?;
        fs::write(config_path(path), self.cfg.to_text())?;
        Ok(())
    }

    /// Trains up to `cfg.epochs`, appending one log row per epoch and
    /// writing checkpoints. `on_epoch` sees each row as it is produced.
    pub fn run(&mut self, mut on_epoch: impl FnMut(&EpochStats)) -> Result<Vec<EpochStats>> {
        if let Some(dir) = self.cfg.log.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let mut log = if self.epoch == 0 || !self.cfg.log.exists() {
            format!("{LOG_HEADER}\n")
        } else {
            fs::read_to_string(&self.cfg.log)?
        };
        let mut out = Vec::new();
        while self.epoch < self.cfg.epochs {
            let s = self.train_epoch()?;
            log.push_str(&self.log_line(&s));
            log.push('\n');
            fs::write(&self.cfg.log, &log)?;
            on_epoch(&s);
            out.push(s);
            if self.cfg.checkpoint_every > 0 && self.epoch.is_multiple_of(self.cfg.checkpoint_every) {
                self.save(&self.cfg.checkpoint)?;
            }
        }
        self.save(&self.cfg.checkpoint)?;
        Ok(out)
    }
}

/// Parses the rows of a training log.
pub fn read_log(path: &Path) -> Result<Vec<EpochStats>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(LOG_HEADER) {
        return Err(PggaError::format("log", "unexpected header"));
    }
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let num = |i: usize| -> Result<f64> {
                f.get(i)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| PggaError::format("log", format!("bad row `{l}`")))
            };
            Ok(EpochStats {
                epoch: num(0)? as usize,
                l_id: num(1)?,
                l_tri: num(2)?,
                total: num(3)?,
            })
        })
        .collect()
}

const EVAL_BATCH: usize = 32;

/// Fills missing batch-norm running statistics by passing `samples`
/// through the network in training mode, without touching parameters.
pub fn calibrate_bn(model: &mut Model, samples: &[Sample], mp: &MaskParams) -> Result<()> {
    let missing: BTreeSet<String> = model.bn.iter().filter(|(_, s)| !s.populated).map(|(n, _)| n.clone()).collect();
    if missing.is_empty() {
        return Ok(());
    }
    for chunk in samples.chunks(EVAL_BATCH) {
        let images = stack_images(chunk)?;
        let heatmaps: Vec<_> = chunk.iter().map(|s| &s.heatmap).collect();
        let masks = model.masks_for(&heatmaps, mp)?;
        let mut stats = model.forward(&images, &masks, Mode::Train)?.bn_stats();
        stats.retain(|(n, _, _)| missing.contains(n));
        model.update_bn(&stats);
    }
    Ok(())
}

/// Descriptors (`N×8d`) and graph attention weights in eval mode.
pub fn extract_all(model: &Model, samples: &[Sample], mp: &MaskParams) -> Result<(Tensor, Vec<[f64; 5]>)> {
    let mut data = Vec::new();
    let mut thetas = Vec::new();
    for chunk in samples.chunks(EVAL_BATCH) {
        let images = stack_images(chunk)?;
        let heatmaps: Vec<_> = chunk.iter().map(|s| &s.heatmap).collect();
        let masks: MaskBatch = model.masks_for(&heatmaps, mp)?;
        let (d, t) = model.extract(&images, &masks)?;
        data.extend_from_slice(d.data());
        thetas.extend(t);
    }
    Ok((Tensor::new(&[samples.len(), model.descriptor_len()], data)?, thetas))
}

pub fn metas(samples: &[Sample]) -> Vec<Meta> {
    samples.iter().map(|s| Meta { id: s.id, camera: s.camera }).collect()
}

/// Ranks `queries` against `gallery` with an eval-mode model.
pub fn evaluate(model: &Model, mp: &MaskParams, queries: &[Sample], gallery: &[Sample]) -> Result<EvalReport> {
    let (q, thetas) = extract_all(model, queries, mp)?;
    let (g, _) = extract_all(model, gallery, mp)?;
    let d = distance_matrix(&q, &g)?;
    EvalReport::compute(&d, &metas(queries), &metas(gallery), thetas)
}

/// Rebuilds a checkpoint's model from its `<ckpt>.cfg` in eval mode.
/// Missing batch-norm statistics are calibrated on the training renders;
/// the returned flag says whether that happened.
pub fn load_for_eval(ckpt: &Path, dataset_seed: Option<u64>) -> Result<(RunConfig, Model, bool)> {
    let cfg_file = config_path(ckpt);
    let text = fs::read_to_string(&cfg_file)
        .map_err(|e| PggaError::Config(format!("cannot read {}: {e}", cfg_file.display())))?;
    let mut cfg = RunConfig::parse(&text)?;
    if dataset_seed.is_some() {
        cfg.dataset_seed = dataset_seed;
    }
    let mut model = cfg.build_model()?;
    checkpoint::load(ckpt, &mut model, None)?;
    let calibrated = !model.bn_ready();
    if calibrated {
        calibrate_bn(&mut model, &generate_dataset(&cfg.dataset())?, &cfg.masks)?;
    }
    model.set_mode(Mode::Eval);
    Ok((cfg, model, calibrated))
}

/// Query/gallery protocol: held-out renders against the training renders.
pub fn eval_split(cfg: &RunConfig) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let data = cfg.dataset();
    Ok((held_out(&data, cfg.eval_renders)?, generate_dataset(&data)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_dump_round_trip() {
        let cfg = RunConfig::parse("epochs = 3 # short\nsaga=off\nomega=1\n").unwrap();
        assert_eq!(cfg.epochs, 3);
        assert!(!cfg.ablation.saga);
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap().to_text(), cfg.to_text());
    }

    #[test]
    fn rejects_unknown_and_duplicate_keys() {
        assert!(matches!(RunConfig::parse("epoch=3"), Err(PggaError::Config(_))));
        assert!(RunConfig::parse("seed=1\nseed=2").is_err());
        assert!(RunConfig::parse("no equals sign").is_err());
        assert!(RunConfig::parse("pose_masks=maybe").is_err());
    }

    #[test]
    fn defaults_follow_settings() {
        let c = RunConfig::default();
        assert_eq!((c.lr_backbone, c.lr_other, c.momentum, c.weight_decay), (0.01, 0.001, 0.9, 0.0005));
        let o = c.optimizer().unwrap();
        assert_eq!(o.lr_for("shadow/s1/conv"), 0.01);
        assert_eq!(o.lr_for("head/0"), 0.001);
    }
}
