use crate::error::{PggaError, Result};
use crate::pose::NUM_PARTS;

/// Activation applied to the per-node graph-attention scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SagaActivation {
    Logistic,
    None,
}

impl SagaActivation {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "logistic" => Ok(Self::Logistic),
            "none" => Ok(Self::None),
            _ => Err(PggaError::Config(format!("saga_activation must be logistic|none, got `{s}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Logistic => "logistic",
            Self::None => "none",
        }
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub shadow_channels: usize,
    pub branch_channels: usize,
    pub reduced_dim: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub coarse_split: f64,
    pub fine_splits: [f64; 3],
    /// Channels per keypoint group; `None` means the default even split.
    pub channel_alloc: Option<Vec<usize>>,
    pub attention_reduction: usize,
    pub saga_activation: SagaActivation,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            shadow_channels: 32,
            branch_channels: 64,
            reduced_dim: 32,
            image_h: 96,
            image_w: 32,
            coarse_split: 0.44,
            fine_splits: [0.2, 0.4, 0.4],
            channel_alloc: None,
            attention_reduction: 4,
            saga_activation: SagaActivation::Logistic,
        }
    }
}

/// Splits `total` channels into 13 contiguous groups, giving the remainder
/// of the floor division to the earliest groups.
pub fn default_channel_alloc(total: usize) -> Vec<usize> {
    let (q, r) = (total / NUM_PARTS, total % NUM_PARTS);
    (0..NUM_PARTS).map(|i| q + usize::from(i < r)).collect()
}

pub(crate) fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| PggaError::Config(format!("`{key}`: cannot parse `{v}`")))
}

pub(crate) fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|s| parse_num(key, s)).collect()
}

pub(crate) fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl BackboneConfig {
    /// Shadow feature map (keypoint grid) size `H/8 × W/8`.
    pub fn shadow_size(&self) -> (usize, usize) {
        (self.image_h / 8, self.image_w / 8)
    }

    /// Branch feature map size `H/16 × W/16`.
    pub fn branch_size(&self) -> (usize, usize) {
        (self.image_h / 16, self.image_w / 16)
    }

    pub fn descriptor_len(&self) -> usize {
        8 * self.reduced_dim
    }

    pub fn alloc(&self) -> Vec<usize> {
        self.channel_alloc
            .clone()
            .unwrap_or_else(|| default_channel_alloc(self.shadow_channels))
    }

    /// Row where the coarse branch's upper grid ends.
    pub fn coarse_boundary(&self) -> usize {
        (self.coarse_split * self.branch_size().0 as f64).round() as usize
    }

    /// Rows where the fine branch's first and second grids end.
    pub fn fine_boundaries(&self) -> [usize; 2] {
        let hf = self.branch_size().0 as f64;
        let [a, b, _] = self.fine_splits;
        [(a * hf).round() as usize, ((a + b) * hf).round() as usize]
    }

    /// Hidden width of an attention map over `c` channels.
    pub fn attention_hidden(&self, c: usize) -> usize {
        (c / self.attention_reduction).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(PggaError::Config(m));
        if self.image_h == 0 || self.image_w == 0 || !self.image_h.is_multiple_of(16) || !self.image_w.is_multiple_of(16) {
            return err(format!(
                "image size {}×{} must be positive multiples of 16",
                self.image_h, self.image_w
            ));
        }
        if self.shadow_channels < 4 || !self.shadow_channels.is_multiple_of(4) {
            return err(format!("shadow_channels {} must be a positive multiple of 4", self.shadow_channels));
        }
        if self.branch_channels < 2 || !self.branch_channels.is_multiple_of(2) {
            return err(format!("branch_channels {} must be a positive even number", self.branch_channels));
        }
        if self.reduced_dim == 0 || self.attention_reduction == 0 {
            return err("reduced_dim and attention_reduction must be positive".into());
        }
        let hf = self.branch_size().0;
        if !(0.0..1.0).contains(&self.coarse_split) {
            return err(format!("coarse_split {} outside (0,1)", self.coarse_split));
        }
        let b = self.coarse_boundary();
        if b == 0 || b >= hf {
            return err(format!("coarse split at row {b} leaves an empty grid of the {hf} branch rows"));
        }
        if self.fine_splits.iter().any(|&f| !(f > 0.0)) || (self.fine_splits.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return err(format!("fine_splits {:?} must be positive and sum to 1", self.fine_splits));
        }
        let [b1, b2] = self.fine_boundaries();
        if !(0 < b1 && b1 < b2 && b2 < hf) {
            return err(format!("fine splits give boundaries {b1},{b2} that leave an empty grid of {hf} rows"));
        }
        let alloc = self.alloc();
        if alloc.len() != NUM_PARTS || alloc.iter().sum::<usize>() != self.shadow_channels {
            return err(format!(
                "channel_alloc must have {NUM_PARTS} entries summing to shadow_channels={}, got {alloc:?}",
                self.shadow_channels
            ));
        }
        Ok(())
    }

    /// Applies one `key=value` setting. Returns `false` for keys this
    /// config does not own.
    pub fn apply(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "shadow_channels" => self.shadow_channels = parse_num(key, v)?,
            "branch_channels" => self.branch_channels = parse_num(key, v)?,
            "reduced_dim" => self.reduced_dim = parse_num(key, v)?,
            "image_h" => self.image_h = parse_num(key, v)?,
            "image_w" => self.image_w = parse_num(key, v)?,
            "coarse_split_fraction" => self.coarse_split = parse_num(key, v)?,
            "fine_split_fractions" => {
                let f: Vec<f64> = parse_list(key, v)?;
                self.fine_splits = f
                    .try_into()
                    .map_err(|_| PggaError::Config("fine_split_fractions needs 3 values".into()))?;
            }
            "channel_alloc" => {
                self.channel_alloc = match v.trim() {
                    "auto" => None,
                    s => Some(parse_list(key, s)?),
                }
            }
            "attention_reduction_ratio" => self.attention_reduction = parse_num(key, v)?,
            "saga_activation" => self.saga_activation = SagaActivation::parse(v.trim())?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        vec![
            ("shadow_channels".into(), self.shadow_channels.to_string()),
            ("branch_channels".into(), self.branch_channels.to_string()),
            ("reduced_dim".into(), self.reduced_dim.to_string()),
            ("image_h".into(), self.image_h.to_string()),
            ("image_w".into(), self.image_w.to_string()),
            ("coarse_split_fraction".into(), self.coarse_split.to_string()),
            ("fine_split_fractions".into(), join(&self.fine_splits)),
            (
                "channel_alloc".into(),
                self.channel_alloc.as_deref().map_or("auto".into(), join),
            ),
            ("attention_reduction_ratio".into(), self.attention_reduction.to_string()),
            ("saga_activation".into(), self.saga_activation.as_str().into()),
        ]
    }
}

/// The on/off switches of the component ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ablation {
    pub pose_masks: bool,
    pub channel_att: bool,
    pub saga: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            pose_masks: true,
            channel_att: true,
            saga: true,
        }
    }
}

pub(crate) fn parse_switch(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        _ => Err(PggaError::Config(format!("`{key}` must be on|off, got `{v}`"))),
    }
}

pub(crate) fn switch_str(b: bool) -> String {
    if b { "on" } else { "off" }.into()
}

impl Ablation {
    pub fn apply(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "pose_masks" => self.pose_masks = parse_switch(key, v)?,
            "channel_att" => self.channel_att = parse_switch(key, v)?,
            "saga" => self.saga = parse_switch(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        vec![
            ("pose_masks".into(), switch_str(self.pose_masks)),
            ("channel_att".into(), switch_str(self.channel_att)),
            ("saga".into(), switch_str(self.saga)),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_geometry() {
        let c = BackboneConfig::default();
        c.validate().unwrap();
        assert_eq!(c.shadow_size(), (12, 4));
        assert_eq!(c.branch_size(), (6, 2));
        assert_eq!(c.coarse_boundary(), 3);
        assert_eq!(c.fine_boundaries(), [1, 4]);
        assert_eq!(c.descriptor_len(), 256);
    }

    #[test]
    fn paper_channel_alloc() {
        let a = default_channel_alloc(512);
        assert_eq!(&a[..5], &[40; 5]);
        assert_eq!(&a[5..], &[39; 8]);
        assert_eq!(a.iter().sum::<usize>(), 512);
    }

    #[test]
    fn paper_descriptor_len() {
        let c = BackboneConfig {
            reduced_dim: 256,
            ..Default::default()
        };
        assert_eq!(c.descriptor_len(), 2048);
    }

    #[test]
    fn rejects_bad_geometry() {
        let bad = BackboneConfig {
            image_h: 100,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = BackboneConfig {
            fine_splits: [0.05, 0.5, 0.45],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = BackboneConfig {
            channel_alloc: Some(vec![2; 13]),
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn kv_round_trip() {
        let mut c = BackboneConfig {
            channel_alloc: Some(default_channel_alloc(32)),
            saga_activation: SagaActivation::None,
            ..Default::default()
        };
        c.coarse_split = 0.5;
        let mut d = BackboneConfig::default();
        for (k, v) in c.to_kv() {
            assert!(d.apply(&k, &v).unwrap());
        }
        assert_eq!(c, d);
        assert!(!d.apply("nope", "1").unwrap());
        assert!(d.apply("image_h", "x").is_err());
    }
}
