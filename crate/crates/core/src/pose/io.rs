//! HMAP heatmap files and PGM mask dumps.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::keypoints::{Heatmap, NUM_PARTS};
use super::masks::MaskParams;
use crate::error::{PggaError, Result};
use crate::tensor::Tensor;

const HMAP_MAGIC: &[u8; 4] = b"HMAP";

pub fn encode_heatmap(h: &Heatmap) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * h.maps().numel());
    out.extend_from_slice(HMAP_MAGIC);
    out.extend_from_slice(&(h.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(h.cols() as u32).to_le_bytes());
    out.extend_from_slice(&(NUM_PARTS as u32).to_le_bytes());
    for &v in h.maps().data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_heatmap(bytes: &[u8]) -> Result<Heatmap> {
    let bad = |msg: String| PggaError::format("HMAP", msg);
    if bytes.len() < 16 || &bytes[..4] != HMAP_MAGIC {
        return Err(bad("missing HMAP header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap()) as usize;
    let (rows, cols, channels) = (word(1), word(2), word(3));
    if channels != NUM_PARTS {
        return Err(bad(format!("expected {NUM_PARTS} channels, found {channels}")));
    }
    if rows == 0 || cols == 0 {
        return Err(bad(format!("empty {rows}×{cols} grid")));
    }
    let n = channels * rows * cols;
    let body = &bytes[16..];
    if body.len() != 4 * n {
        return Err(bad(format!("expected {} payload bytes, found {}", 4 * n, body.len())));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Heatmap::new(Tensor::new(&[channels, rows, cols], data)?)
}

pub fn read_heatmap(path: &Path) -> Result<Heatmap> {
    decode_heatmap(&fs::read(path)?)
}

pub fn write_heatmap(path: &Path, h: &Heatmap) -> Result<()> {
    fs::write(path, encode_heatmap(h))?;
    Ok(())
}

/// Maps `[β, α(1−β)]` linearly onto `[0, 255]`, clamping outside values.
pub fn mask_to_gray(v: f64, p: &MaskParams) -> u8 {
    let t = (v - p.outside()) / (p.inside() - p.outside());
    (255.0 * t.clamp(0.0, 1.0)).round() as u8
}

/// Binary PGM (P5) of a rank-2 grid.
pub fn encode_pgm(grid: &Tensor, p: &MaskParams) -> Result<Vec<u8>> {
    if grid.rank() != 2 {
        return Err(PggaError::shape("encode_pgm", "rank-2 grid", format!("{:?}", grid.shape())));
    }
    let (h, w) = (grid.shape()[0], grid.shape()[1]);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(grid.data().iter().map(|&v| mask_to_gray(v, p)));
    Ok(out)
}

pub fn write_pgm(path: &Path, grid: &Tensor, p: &MaskParams) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_pgm(grid, p)?)?;
    Ok(())
}

/// Parses a P5 file with maxval 255, returning `(rows, cols, pixels)`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |msg: &str| PggaError::format("PGM", msg.to_string());
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
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad("expected P5 with maxval 255"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    let pixels = bytes.get(pos + 1..).ok_or_else(|| bad("missing pixels"))?;
    if pixels.len() != w * h {
        return Err(bad("pixel count does not match header"));
    }
    Ok((h, w, pixels.to_vec()))
}
