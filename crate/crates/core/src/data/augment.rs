use rand::Rng;

use super::synth::Sample;
use crate::tensor::Tensor;

/// Mirrors a `C×H×W` image left to right.
pub fn mirror_image(img: &Tensor) -> Tensor {
    let s = img.shape();
    let w = s[s.len() - 1];
    let mut out = img.clone();
    for (src, dst) in img.data().chunks(w).zip(out.data_mut().chunks_mut(w)) {
        for (c, v) in src.iter().enumerate() {
            dst[w - 1 - c] = *v;
        }
    }
    out
}

/// Horizontal flip of image, heatmap and keypoints together.
pub fn flip_augment(s: &Sample) -> Sample {
    Sample {
        image: mirror_image(&s.image),
        heatmap: s.heatmap.flipped(),
        keypoints: s.keypoints.flipped(),
        id: s.id,
        camera: s.camera,
    }
}

/// Bounds of the erased rectangle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EraseParams {
    pub enabled: bool,
    pub area: (f64, f64),
    pub aspect: (f64, f64),
}

impl Default for EraseParams {
    fn default() -> Self {
        Self {
            enabled: true,
            area: (0.02, 0.2),
            aspect: (0.3, 3.3),
        }
    }
}

/// Rectangle `(top, left, height, width)` chosen by [`erase_augment`].
pub type EraseRect = (usize, usize, usize, usize);

/// Fills one random rectangle of the image with uniform noise; heatmap and
/// keypoints are left alone. Returns the sample and the rectangle, if one
/// fitted within 100 draws.
pub fn erase_augment<R: Rng + ?Sized>(s: &Sample, p: &EraseParams, rng: &mut R) -> (Sample, Option<EraseRect>) {
    if !p.enabled {
        return (s.clone(), None);
    }
    let (c, h, w) = (s.image.shape()[0], s.image.shape()[1], s.image.shape()[2]);
    let total = (h * w) as f64;
    for _ in 0..100 {
        let area = total * rng.random_range(p.area.0..=p.area.1);
        let aspect = rng.random_range(p.aspect.0..=p.aspect.1);
        let eh = (area * aspect).sqrt().round() as usize;
        let ew = (area / aspect).sqrt().round() as usize;
        if eh == 0 || ew == 0 || eh >= h || ew >= w {
            continue;
        }
        let top = rng.random_range(0..=h - eh);
        let left = rng.random_range(0..=w - ew);
        let mut out = s.clone();
        let img = out.image.data_mut();
        for ch in 0..c {
            for r in top..top + eh {
                for col in left..left + ew {
                    img[(ch * h + r) * w + col] = rng.random();
                }
            }
        }
        return (out, Some((top, left, eh, ew)));
    }
    (s.clone(), None)
}
