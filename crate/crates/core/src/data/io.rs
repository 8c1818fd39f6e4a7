//! Sample directories: `NNNNN.ppm` images, `NNNNN.hmap` heatmaps and an
//! `index.csv` of `id,camera` lines.

use std::fs;
use std::path::Path;

use super::synth::Sample;
use crate::error::{PggaError, Result};
use crate::pose::io::{decode_heatmap, encode_heatmap};
use crate::pose::extract_keypoints;
use crate::tensor::Tensor;

pub const INDEX_FILE: &str = "index.csv";

/// Binary PPM (P6) of a `3×H×W` image in `[0,1]`.
pub fn encode_ppm(img: &Tensor) -> Result<Vec<u8>> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(PggaError::shape("encode_ppm", "3×H×W", format!("{s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let n = h * w;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = img.data();
    for i in 0..n {
        for c in 0..3 {
            out.push((255.0 * d[c * n + i].clamp(0.0, 1.0)).round() as u8);
        }
    }
    Ok(out)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let bad = |msg: &str| PggaError::format("PPM", msg.to_string());
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ascii header"))?);
    }
    if fields[0] != "P6" || fields[3] != "255" {
        return Err(bad("expected P6 with maxval 255"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    let px = bytes.get(pos + 1..).ok_or_else(|| bad("missing pixels"))?;
    if px.len() != 3 * w * h {
        return Err(bad("pixel count does not match header"));
    }
    let n = h * w;
    let mut data = vec![0.0; 3 * n];
    for (i, rgb) in px.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * n + i] = rgb[c] as f64 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

/// Writes every sample plus the index file into `dir`.
pub fn write_samples(dir: &Path, samples: &[Sample]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut index = String::from("id,camera\n");
    for (i, s) in samples.iter().enumerate() {
        fs::write(dir.join(format!("{i:05}.ppm")), encode_ppm(&s.image)?)?;
        fs::write(dir.join(format!("{i:05}.hmap")), encode_heatmap(&s.heatmap))?;
        index.push_str(&format!("{},{}\n", s.id, s.camera));
    }
    fs::write(dir.join(INDEX_FILE), index)?;
    Ok(())
}

/// Reads a directory written by [`write_samples`]. Keypoints come from the
/// stored heatmaps.
pub fn read_samples(dir: &Path) -> Result<Vec<Sample>> {
    let index = fs::read_to_string(dir.join(INDEX_FILE))?;
    let mut lines = index.lines();
    if lines.next().map(str::trim) != Some("id,camera") {
        return Err(PggaError::format("index", "missing `id,camera` header"));
    }
    let mut out = Vec::new();
    for (i, line) in lines.filter(|l| !l.trim().is_empty()).enumerate() {
        let (id, cam) = line
            .split_once(',')
            .ok_or_else(|| PggaError::format("index", format!("line {}: `{line}`", i + 2)))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| PggaError::format("index", format!("line {}: `{line}`", i + 2)))
        };
        let image = decode_ppm(&fs::read(dir.join(format!("{i:05}.ppm")))?)?;
        let heatmap = decode_heatmap(&fs::read(dir.join(format!("{i:05}.hmap")))?)?;
        out.push(Sample {
            image,
            keypoints: extract_keypoints(&heatmap),
            heatmap,
            id: parse(id)?,
            camera: parse(cam)?,
        });
    }
    Ok(out)
}
