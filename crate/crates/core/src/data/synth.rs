//! Procedural pedestrian renders with exact keypoints.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{PggaError, Result};
use crate::network::config::parse_num;
use crate::pose::{Heatmap, Keypoint, KeypointSet, Part, NUM_PARTS};
use crate::tensor::Tensor;

/// Feature-map stride of the keypoint grid.
pub const GRID_STRIDE: usize = 8;

pub type Rgb = [f64; 3];

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub num_identities: usize,
    pub samples_per_identity: usize,
    pub cameras: usize,
    /// Density of background rectangles, in `[0,1]`.
    pub clutter: f64,
    /// Per-render joint displacement, in `[0,1]`.
    pub pose_jitter: f64,
    pub seed: u64,
    pub image_h: usize,
    pub image_w: usize,
    /// Heatmap value at the true joint cell.
    pub peak: f64,
    /// Heatmap value everywhere else.
    pub floor: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            num_identities: 8,
            samples_per_identity: 16,
            cameras: 2,
            clutter: 0.3,
            pose_jitter: 0.5,
            seed: 0,
            image_h: 96,
            image_w: 32,
            peak: 0.9,
            floor: 0.15,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PggaError::Config(m));
        if self.num_identities == 0 || self.samples_per_identity == 0 || self.cameras == 0 {
            return bad(format!(
                "dataset needs ≥ 1 identity, sample and camera, got {}/{}/{}",
                self.num_identities, self.samples_per_identity, self.cameras
            ));
        }
        if !(0.0..=1.0).contains(&self.clutter) || !(0.0..=1.0).contains(&self.pose_jitter) {
            return bad(format!(
                "clutter_level and pose_jitter must lie in [0,1], got {} and {}",
                self.clutter, self.pose_jitter
            ));
        }
        if !self.image_h.is_multiple_of(2 * GRID_STRIDE) || !self.image_w.is_multiple_of(2 * GRID_STRIDE) || self.image_h == 0 || self.image_w == 0 {
            return bad(format!("image size {}×{} must be a positive multiple of 16", self.image_h, self.image_w));
        }
        if !(0.0..=1.0).contains(&self.floor) || !(self.peak > self.floor && self.peak <= 1.0) {
            return bad(format!("heatmap values need 0 ≤ floor < peak ≤ 1, got {} and {}", self.floor, self.peak));
        }
        Ok(())
    }

    pub fn grid_size(&self) -> (usize, usize) {
        (self.image_h / GRID_STRIDE, self.image_w / GRID_STRIDE)
    }

    pub fn apply(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "num_identities" => self.num_identities = parse_num(key, v)?,
            "samples_per_identity" => self.samples_per_identity = parse_num(key, v)?,
            "cameras" => self.cameras = parse_num(key, v)?,
            "clutter_level" => self.clutter = parse_num(key, v)?,
            "pose_jitter" => self.pose_jitter = parse_num(key, v)?,
            "dataset_seed" => self.seed = parse_num(key, v)?,
            "heatmap_peak" => self.peak = parse_num(key, v)?,
            "heatmap_floor" => self.floor = parse_num(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        vec![
            ("num_identities".into(), self.num_identities.to_string()),
            ("samples_per_identity".into(), self.samples_per_identity.to_string()),
            ("cameras".into(), self.cameras.to_string()),
            ("clutter_level".into(), self.clutter.to_string()),
            ("pose_jitter".into(), self.pose_jitter.to_string()),
            ("dataset_seed".into(), self.seed.to_string()),
            ("heatmap_peak".into(), self.peak.to_string()),
            ("heatmap_floor".into(), self.floor.to_string()),
        ]
    }
}

/// Appearance of one identity.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentitySpec {
    pub id: usize,
    pub head: Rgb,
    pub torso: Rgb,
    pub limbs: Rgb,
    /// Horizontal scale of shoulders and hips.
    pub torso_width: f64,
    /// Vertical scale of arms and legs.
    pub limb_length: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `3×H×W`, values in `[0,1]`.
    pub image: Tensor,
    pub heatmap: Heatmap,
    pub keypoints: KeypointSet,
    pub id: usize,
    pub camera: usize,
}

/// Distinct RNG stream per `(seed, a, b)`.
fn stream(seed: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((a << 32) ^ b);
    rng
}

const APPEARANCE: u64 = u32::MAX as u64;
const CAMERA: u64 = u32::MAX as u64 - 1;

fn hsv(h: f64, s: f64, v: f64) -> Rgb {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6 % 2.0 - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Appearance of identity `id`; torso hues are spread by the golden ratio
/// so no two identities share one.
pub fn identity_spec(cfg: &DatasetConfig, id: usize) -> IdentitySpec {
    let mut rng = stream(cfg.seed, APPEARANCE, id as u64);
    let hue = 0.618_033_988_749_895 * id as f64 + rng.random::<f64>() * 0.05;
    IdentitySpec {
        id,
        head: hsv(0.05 + 0.05 * rng.random::<f64>(), 0.3 + 0.4 * rng.random::<f64>(), 0.4 + 0.5 * rng.random::<f64>()),
        torso: hsv(hue, 0.55 + 0.4 * rng.random::<f64>(), 0.5 + 0.45 * rng.random::<f64>()),
        limbs: hsv(rng.random(), 0.2 + 0.7 * rng.random::<f64>(), 0.2 + 0.7 * rng.random::<f64>()),
        torso_width: 0.85 + 0.3 * rng.random::<f64>(),
        limb_length: 0.9 + 0.2 * rng.random::<f64>(),
        seed: cfg.seed,
    }
}

/// Flat background color of a camera.
pub fn camera_color(cfg: &DatasetConfig, camera: usize) -> Rgb {
    let mut rng = stream(cfg.seed, CAMERA, camera as u64);
    hsv(rng.random(), 0.1 + 0.3 * rng.random::<f64>(), 0.35 + 0.4 * rng.random::<f64>())
}

/// Canonical joints as `(y, x)` fractions of the image, channel order.
const SKELETON: [(f64, f64); NUM_PARTS] = [
    (0.10, 0.50),
    (0.22, 0.28),
    (0.22, 0.72),
    (0.37, 0.20),
    (0.37, 0.80),
    (0.51, 0.17),
    (0.51, 0.83),
    (0.52, 0.38),
    (0.52, 0.62),
    (0.71, 0.36),
    (0.71, 0.64),
    (0.90, 0.35),
    (0.90, 0.65),
];

/// Joint positions in pixels for one render.
fn pose(spec: &IdentitySpec, cfg: &DatasetConfig, rng: &mut ChaCha8Rng) -> [(f64, f64); NUM_PARTS] {
    let (h, w) = (cfg.image_h as f64, cfg.image_w as f64);
    let j = cfg.pose_jitter;
    let noise = Normal::new(0.0, 0.05 * w * j + 1e-12).expect("finite std");
    let shift = (j * 0.06 * h * (rng.random::<f64>() - 0.5), j * 0.2 * w * (rng.random::<f64>() - 0.5));
    let mut pts = [(0.0, 0.0); NUM_PARTS];
    for (i, &(fy, fx)) in SKELETON.iter().enumerate() {
        let part = Part::ALL[i];
        let (mut y, mut x) = (fy, fx);
        let dx = x - 0.5;
        x = 0.5 + dx * spec.torso_width;
        y = match part {
            Part::LeftElbow | Part::RightElbow | Part::LeftHand | Part::RightHand => 0.22 + (y - 0.22) * spec.limb_length,
            Part::LeftKnee | Part::RightKnee | Part::LeftFoot | Part::RightFoot => 0.52 + (y - 0.52) * spec.limb_length,
            _ => y,
        };
        let py = y * h + shift.0 + noise.sample(rng);
        let px = x * w + shift.1 + noise.sample(rng);
        pts[i] = (py.clamp(0.0, h - 1e-6), px.clamp(0.0, w - 1e-6));
    }
    pts
}

struct Canvas {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Canvas {
    fn new(h: usize, w: usize, bg: Rgb) -> Self {
        let mut data = vec![0.0; 3 * h * w];
        for (c, plane) in data.chunks_mut(h * w).enumerate() {
            plane.fill(bg[c]);
        }
        Self { h, w, data }
    }

    /// Paints every pixel whose center satisfies `inside`.
    fn fill(&mut self, color: Rgb, y0: f64, y1: f64, x0: f64, x1: f64, inside: impl Fn(f64, f64) -> bool) {
        let r0 = y0.floor().max(0.0) as usize;
        let r1 = (y1.ceil().max(0.0) as usize).min(self.h);
        let c0 = x0.floor().max(0.0) as usize;
        let c1 = (x1.ceil().max(0.0) as usize).min(self.w);
        let n = self.h * self.w;
        for r in r0..r1 {
            for c in c0..c1 {
                if inside(r as f64 + 0.5, c as f64 + 0.5) {
                    for (ch, &v) in color.iter().enumerate() {
                        self.data[ch * n + r * self.w + c] = v;
                    }
                }
            }
        }
    }

    fn rect(&mut self, color: Rgb, y0: f64, x0: f64, hh: f64, ww: f64) {
        self.fill(color, y0, y0 + hh, x0, x0 + ww, |_, _| true);
    }

    fn disc(&mut self, color: Rgb, (cy, cx): (f64, f64), r: f64) {
        self.fill(color, cy - r, cy + r, cx - r, cx + r, |y, x| (y - cy).powi(2) + (x - cx).powi(2) <= r * r);
    }

    fn capsule(&mut self, color: Rgb, a: (f64, f64), b: (f64, f64), r: f64) {
        let (y0, y1) = (a.0.min(b.0) - r, a.0.max(b.0) + r);
        let (x0, x1) = (a.1.min(b.1) - r, a.1.max(b.1) + r);
        self.fill(color, y0, y1, x0, x1, |y, x| segment_dist2((y, x), a, b) <= r * r);
    }

    /// Convex polygon with vertices in either winding order.
    fn polygon(&mut self, color: Rgb, pts: &[(f64, f64)]) {
        let y0 = pts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
        let y1 = pts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
        let x0 = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        let x1 = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        self.fill(color, y0, y1, x0, x1, |y, x| {
            let mut sign = 0.0;
            for i in 0..pts.len() {
                let (a, b) = (pts[i], pts[(i + 1) % pts.len()]);
                let cr = (b.0 - a.0) * (x - a.1) - (b.1 - a.1) * (y - a.0);
                if cr != 0.0 {
                    if sign == 0.0 {
                        sign = cr.signum();
                    } else if cr.signum() != sign {
                        return false;
                    }
                }
            }
            true
        });
    }
}

fn segment_dist2(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dy, dx) = (b.0 - a.0, b.1 - a.1);
    let len2 = dy * dy + dx * dx;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dy + (p.1 - a.1) * dx) / len2).clamp(0.0, 1.0)
    };
    let (qy, qx) = (a.0 + t * dy, a.1 + t * dx);
    (p.0 - qy).powi(2) + (p.1 - qx).powi(2)
}

/// Background rectangles, biased towards the left and right crop borders.
/// Half of them wear the clothing color of some identity.
fn clutter(canvas: &mut Canvas, cfg: &DatasetConfig, rng: &mut ChaCha8Rng) {
    let count = (cfg.clutter * 14.0).round() as usize;
    let (h, w) = (canvas.h as f64, canvas.w as f64);
    for _ in 0..count {
        let color = if rng.random_bool(0.5) {
            let other = identity_spec(cfg, rng.random_range(0..cfg.num_identities));
            if rng.random_bool(0.5) {
                other.torso
            } else {
                other.limbs
            }
        } else {
            [rng.random(), rng.random(), rng.random()]
        };
        let rh = h * (0.06 + 0.3 * rng.random::<f64>());
        let rw = w * (0.1 + 0.3 * rng.random::<f64>());
        let y0 = rng.random::<f64>() * h - rh / 2.0;
        let x0 = match rng.random_range(0..10) {
            0..=3 => -rw / 2.0 + 0.15 * w * rng.random::<f64>(),
            4..=7 => w - rw / 2.0 - 0.15 * w * rng.random::<f64>(),
            _ => rng.random::<f64>() * w - rw / 2.0,
        };
        canvas.rect(color, y0, x0, rh, rw);
    }
}

fn shade(c: Rgb, k: f64) -> Rgb {
    c.map(|v| (v * k).clamp(0.0, 1.0))
}

/// Render `index` of identity `id`; indices past `samples_per_identity`
/// give held-out renders of the same person.
pub fn render(cfg: &DatasetConfig, id: usize, index: usize) -> Sample {
    let spec = identity_spec(cfg, id);
    let mut rng = stream(cfg.seed, id as u64, index as u64);
    let camera = (index + id) % cfg.cameras;
    let (h, w) = (cfg.image_h, cfg.image_w);
    let mut canvas = Canvas::new(h, w, camera_color(cfg, camera));
    clutter(&mut canvas, cfg, &mut rng);

    let pts = pose(&spec, cfg, &mut rng);
    let light = 0.92 + 0.16 * rng.random::<f64>();
    let (torso, limbs, head) = (shade(spec.torso, light), shade(spec.limbs, light), shade(spec.head, light));
    let limb_r = 0.07 * w as f64;
    let p = |part: Part| pts[part.index()];
    for (a, b, c) in [
        (Part::LeftHip, Part::LeftKnee, Part::LeftFoot),
        (Part::RightHip, Part::RightKnee, Part::RightFoot),
    ] {
        canvas.capsule(limbs, p(a), p(b), limb_r * 1.2);
        canvas.capsule(limbs, p(b), p(c), limb_r * 1.1);
    }
    canvas.polygon(
        torso,
        &[p(Part::LeftShoulder), p(Part::RightShoulder), p(Part::RightHip), p(Part::LeftHip)],
    );
    for (a, b, c) in [
        (Part::LeftShoulder, Part::LeftElbow, Part::LeftHand),
        (Part::RightShoulder, Part::RightElbow, Part::RightHand),
    ] {
        canvas.capsule(limbs, p(a), p(b), limb_r);
        canvas.capsule(limbs, p(b), p(c), limb_r * 0.9);
    }
    let head_r = 0.055 * h as f64;
    canvas.disc(head, p(Part::Head), head_r);

    let (gh, gw) = cfg.grid_size();
    let entries = std::array::from_fn(|i| Keypoint {
        row: ((pts[i].0 / GRID_STRIDE as f64) as usize).min(gh - 1),
        col: ((pts[i].1 / GRID_STRIDE as f64) as usize).min(gw - 1),
        conf: cfg.peak,
    });
    let keypoints = KeypointSet::new(entries, gh, gw).expect("joints clamped to the grid");
    Sample {
        image: Tensor::new(&[3, h, w], canvas.data).expect("canvas size"),
        heatmap: heatmap_for(&keypoints, cfg.floor),
        keypoints,
        id,
        camera,
    }
}

/// Delta heatmaps: each joint's cell holds its confidence, the rest `floor`.
pub fn heatmap_for(kps: &KeypointSet, floor: f64) -> Heatmap {
    let mut t = Tensor::full(&[NUM_PARTS, kps.rows, kps.cols], floor);
    for (n, k) in kps.entries.iter().enumerate() {
        t.set(&[n, k.row, k.col], k.conf);
    }
    Heatmap::new(t).expect("values in [0,1]")
}

/// All renders, grouped by identity: sample `i·S + j` is render `j` of
/// identity `i`.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Vec<Sample>> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(cfg.num_identities * cfg.samples_per_identity);
    for id in 0..cfg.num_identities {
        for j in 0..cfg.samples_per_identity {
            out.push(render(cfg, id, j));
        }
    }
    Ok(out)
}

/// `count` renders per identity not contained in [`generate_dataset`].
pub fn held_out(cfg: &DatasetConfig, count: usize) -> Result<Vec<Sample>> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(cfg.num_identities * count);
    for id in 0..cfg.num_identities {
        for j in 0..count {
            out.push(render(cfg, id, cfg.samples_per_identity + j));
        }
    }
    Ok(out)
}
