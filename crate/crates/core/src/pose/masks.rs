//! Rasterized attention masks built from keypoint locations.
//!
//! Every keypoint is expanded into a square of half-width ω. The coarse mask
//! joins these squares into six body regions:
//!
//! * head: its square;
//! * upper torso: the filled convex hull of the two shoulder and two hip
//!   squares;
//! * arms and legs: every cell within Chebyshev distance ω of the two limb
//!   segments (shoulder→elbow→hand, hip→knee→foot), which also covers the
//!   joint squares.
//!
//! Fine masks keep one confidence-scaled square per keypoint.

use std::collections::BTreeSet;

use super::keypoints::{Keypoint, KeypointSet, Part, NUM_PARTS};
use crate::error::{PggaError, Result};
use crate::tensor::Tensor;

/// ω, α and β of the masks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskParams {
    pub omega: usize,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for MaskParams {
    fn default() -> Self {
        Self {
            omega: 2,
            alpha: 2.0,
            beta: 0.5,
        }
    }
}

impl MaskParams {
    pub fn new(omega: usize, alpha: f64, beta: f64) -> Result<Self> {
        let p = Self { omega, alpha, beta };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.inside() > self.beta) || !self.beta.is_finite() {
            return Err(PggaError::Config(format!(
                "mask weights need α(1−β) > β, got α={} β={}",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }

    /// Weight of cells inside the attention region, `α(1−β)`.
    pub fn inside(&self) -> f64 {
        self.alpha * (1.0 - self.beta)
    }

    pub fn outside(&self) -> f64 {
        self.beta
    }
}

/// A weight grid over feature-map cells.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    pub grid: Tensor,
    pub inside_value: f64,
    pub outside_value: f64,
}

impl AttentionMask {
    pub fn rows(&self) -> usize {
        self.grid.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.grid.shape()[1]
    }

    /// A mask of ones, used when pose guidance is disabled.
    pub fn ones(rows: usize, cols: usize) -> Self {
        Self {
            grid: Tensor::ones(&[rows, cols]),
            inside_value: 1.0,
            outside_value: 1.0,
        }
    }

    pub fn mirrored(&self) -> AttentionMask {
        let (h, w) = (self.rows(), self.cols());
        let mut grid = Tensor::zeros(&[h, w]);
        for r in 0..h {
            for c in 0..w {
                grid.set(&[r, c], self.grid.at(&[r, w - 1 - c]));
            }
        }
        AttentionMask { grid, ..*self }
    }
}

/// Inclusive cell rectangle `rows.0..=rows.1 × cols.0..=cols.1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellRect {
    pub rows: (usize, usize),
    pub cols: (usize, usize),
}

impl CellRect {
    pub fn cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (self.rows.0..=self.rows.1).flat_map(move |r| (self.cols.0..=self.cols.1).map(move |c| (r, c)))
    }

    pub fn len(&self) -> usize {
        (self.rows.1 - self.rows.0 + 1) * (self.cols.1 - self.cols.0 + 1)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        (self.rows.0..=self.rows.1).contains(&r) && (self.cols.0..=self.cols.1).contains(&c)
    }

    fn corners(&self) -> [(i64, i64); 4] {
        let (r0, r1, c0, c1) = (self.rows.0 as i64, self.rows.1 as i64, self.cols.0 as i64, self.cols.1 as i64);
        [(r0, c0), (r0, c1), (r1, c0), (r1, c1)]
    }
}

/// All cells within `ω` of `loc` in both axes, clamped to `bounds`.
pub fn square_area(loc: (usize, usize), omega: usize, bounds: (usize, usize)) -> CellRect {
    let (row, col) = loc;
    debug_assert!(row < bounds.0 && col < bounds.1);
    CellRect {
        rows: (row.saturating_sub(omega), (row + omega).min(bounds.0 - 1)),
        cols: (col.saturating_sub(omega), (col + omega).min(bounds.1 - 1)),
    }
}

fn cross(o: (i64, i64), a: (i64, i64), b: (i64, i64)) -> i64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Convex hull (Andrew's monotone chain) in counter-clockwise order without
/// collinear points. Degenerate inputs yield one or two points.
fn convex_hull(points: &[(i64, i64)]) -> Vec<(i64, i64)> {
    let mut pts: Vec<(i64, i64)> = points.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    if pts.len() <= 2 {
        return pts;
    }
    pts.sort_unstable();
    let mut hull: Vec<(i64, i64)> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        for &p in &pts {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
        if pass == 0 {
            pts.reverse();
        }
    }
    hull
}

/// Inclusive point-in-convex-polygon test for the output of `convex_hull`.
fn hull_contains(hull: &[(i64, i64)], p: (i64, i64)) -> bool {
    match hull.len() {
        0 => false,
        1 => hull[0] == p,
        2 => {
            let (a, b) = (hull[0], hull[1]);
            cross(a, b, p) == 0 && (a.0.min(b.0)..=a.0.max(b.0)).contains(&p.0) && (a.1.min(b.1)..=a.1.max(b.1)).contains(&p.1)
        }
        n => (0..n).all(|i| cross(hull[i], hull[(i + 1) % n], p) >= 0),
    }
}

fn fill_hull(region: &mut [bool], bounds: (usize, usize), points: &[(i64, i64)]) {
    let hull = convex_hull(points);
    let (lo_r, hi_r) = hull.iter().fold((i64::MAX, i64::MIN), |(lo, hi), p| (lo.min(p.0), hi.max(p.0)));
    let (lo_c, hi_c) = hull.iter().fold((i64::MAX, i64::MIN), |(lo, hi), p| (lo.min(p.1), hi.max(p.1)));
    for r in lo_r.max(0)..=hi_r.min(bounds.0 as i64 - 1) {
        for c in lo_c.max(0)..=hi_c.min(bounds.1 as i64 - 1) {
            if hull_contains(&hull, (r, c)) {
                region[r as usize * bounds.1 + c as usize] = true;
            }
        }
    }
}

/// Cells within Chebyshev distance ω of segment `a→b`: the convex hull of
/// the two (unclamped) squares, intersected with the grid.
fn fill_limb_segment(region: &mut [bool], bounds: (usize, usize), a: Keypoint, b: Keypoint, omega: usize) {
    let w = omega as i64;
    let mut pts = Vec::with_capacity(8);
    for k in [a, b] {
        let (r, c) = (k.row as i64, k.col as i64);
        pts.extend_from_slice(&[(r - w, c - w), (r - w, c + w), (r + w, c - w), (r + w, c + w)]);
    }
    fill_hull(region, bounds, &pts);
}

/// Membership grid (row-major) of the six-region body outline.
pub fn coarse_region(kps: &KeypointSet, omega: usize) -> Vec<bool> {
    let bounds = (kps.rows, kps.cols);
    let mut region = vec![false; bounds.0 * bounds.1];
    let square = |p: Part| {
        let k = kps.get(p);
        square_area((k.row, k.col), omega, bounds)
    };

    for (r, c) in square(Part::Head).cells() {
        region[r * bounds.1 + c] = true;
    }

    let torso: Vec<(i64, i64)> = [Part::LeftShoulder, Part::RightShoulder, Part::RightHip, Part::LeftHip]
        .into_iter()
        .flat_map(|p| square(p).corners())
        .collect();
    fill_hull(&mut region, bounds, &torso);

    const LIMBS: [[Part; 3]; 4] = [
        [Part::LeftShoulder, Part::LeftElbow, Part::LeftHand],
        [Part::RightShoulder, Part::RightElbow, Part::RightHand],
        [Part::LeftHip, Part::LeftKnee, Part::LeftFoot],
        [Part::RightHip, Part::RightKnee, Part::RightFoot],
    ];
    for [root, mid, end] in LIMBS {
        fill_limb_segment(&mut region, bounds, kps.get(root), kps.get(mid), omega);
        fill_limb_segment(&mut region, bounds, kps.get(mid), kps.get(end), omega);
    }
    region
}

/// `α(1−β)` inside the body outline, `β` elsewhere.
pub fn coarse_mask(kps: &KeypointSet, p: &MaskParams) -> AttentionMask {
    let region = coarse_region(kps, p.omega);
    let data = region.iter().map(|&inside| if inside { p.inside() } else { p.outside() }).collect();
    AttentionMask {
        grid: Tensor::new(&[kps.rows, kps.cols], data).expect("grid size"),
        inside_value: p.inside(),
        outside_value: p.outside(),
    }
}

/// One mask per keypoint: `conf·α(1−β)` on its square, `β` elsewhere.
pub fn fine_masks(kps: &KeypointSet, p: &MaskParams) -> Vec<AttentionMask> {
    let bounds = (kps.rows, kps.cols);
    (0..NUM_PARTS)
        .map(|n| {
            let k = kps.entries[n];
            let inside = k.conf * p.inside();
            let mut grid = Tensor::full(&[bounds.0, bounds.1], p.outside());
            for (r, c) in square_area((k.row, k.col), p.omega, bounds).cells() {
                grid.set(&[r, c], inside);
            }
            AttentionMask {
                grid,
                inside_value: inside,
                outside_value: p.outside(),
            }
        })
        .collect()
}

/// Halves both dimensions by averaging 2×2 blocks.
pub fn downsample_mask(m: &AttentionMask) -> Result<Tensor> {
    let (h, w) = (m.rows(), m.cols());
    if h % 2 != 0 || w % 2 != 0 {
        return Err(PggaError::shape("downsample_mask", "even dimensions", format!("{h}×{w}")));
    }
    let mut out = Tensor::zeros(&[h / 2, w / 2]);
    for r in 0..h / 2 {
        for c in 0..w / 2 {
            let s = m.grid.at(&[2 * r, 2 * c])
                + m.grid.at(&[2 * r, 2 * c + 1])
                + m.grid.at(&[2 * r + 1, 2 * c])
                + m.grid.at(&[2 * r + 1, 2 * c + 1]);
            out.set(&[r, c], s / 4.0);
        }
    }
    Ok(out)
}
