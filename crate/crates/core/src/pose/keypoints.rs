use crate::error::{PggaError, Result};
use crate::tensor::Tensor;

pub const NUM_PARTS: usize = 13;

/// The thirteen body parts, in channel order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Part {
    Head = 0,
    LeftShoulder,
    RightShoulder,
    LeftElbow,
    RightElbow,
    LeftHand,
    RightHand,
    LeftHip,
    RightHip,
    LeftKnee,
    RightKnee,
    LeftFoot,
    RightFoot,
}

impl Part {
    pub const ALL: [Part; NUM_PARTS] = [
        Part::Head,
        Part::LeftShoulder,
        Part::RightShoulder,
        Part::LeftElbow,
        Part::RightElbow,
        Part::LeftHand,
        Part::RightHand,
        Part::LeftHip,
        Part::RightHip,
        Part::LeftKnee,
        Part::RightKnee,
        Part::LeftFoot,
        Part::RightFoot,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// The left/right counterpart; the head maps to itself.
    pub fn mirrored(self) -> Part {
        let i = self.index();
        if i == 0 {
            self
        } else if i % 2 == 1 {
            Part::ALL[i + 1]
        } else {
            Part::ALL[i - 1]
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Part::Head => "head",
            Part::LeftShoulder => "l_shoulder",
            Part::RightShoulder => "r_shoulder",
            Part::LeftElbow => "l_elbow",
            Part::RightElbow => "r_elbow",
            Part::LeftHand => "l_hand",
            Part::RightHand => "r_hand",
            Part::LeftHip => "l_hip",
            Part::RightHip => "r_hip",
            Part::LeftKnee => "l_knee",
            Part::RightKnee => "r_knee",
            Part::LeftFoot => "l_foot",
            Part::RightFoot => "r_foot",
        }
    }
}

/// Thirteen keypoint heatmaps on the `H/8 × W/8` grid, values in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    maps: Tensor,
}

impl Heatmap {
    pub fn new(maps: Tensor) -> Result<Self> {
        if maps.rank() != 3 || maps.shape()[0] != NUM_PARTS {
            return Err(PggaError::shape("heatmap", "13×Hm×Wm", format!("{:?}", maps.shape())));
        }
        if let Some(v) = maps.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(PggaError::InvalidArgument(format!("heatmap value {v} outside [0,1]")));
        }
        Ok(Self { maps })
    }

    pub fn maps(&self) -> &Tensor {
        &self.maps
    }

    pub fn rows(&self) -> usize {
        self.maps.shape()[1]
    }

    pub fn cols(&self) -> usize {
        self.maps.shape()[2]
    }

    pub fn channel(&self, part: usize) -> &[f64] {
        let n = self.rows() * self.cols();
        &self.maps.data()[part * n..(part + 1) * n]
    }

    /// Mirrors columns and swaps left/right channels.
    pub fn flipped(&self) -> Heatmap {
        let (h, w) = (self.rows(), self.cols());
        let mut out = Tensor::zeros(self.maps.shape());
        for part in Part::ALL {
            let src = self.channel(part.index());
            let dst_c = part.mirrored().index();
            let dst = &mut out.data_mut()[dst_c * h * w..(dst_c + 1) * h * w];
            for r in 0..h {
                for c in 0..w {
                    dst[r * w + (w - 1 - c)] = src[r * w + c];
                }
            }
        }
        Heatmap { maps: out }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub row: usize,
    pub col: usize,
    pub conf: f64,
}

/// One keypoint per body part on a `rows × cols` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSet {
    pub entries: [Keypoint; NUM_PARTS],
    pub rows: usize,
    pub cols: usize,
}

impl KeypointSet {
    pub fn new(entries: [Keypoint; NUM_PARTS], rows: usize, cols: usize) -> Result<Self> {
        for (i, k) in entries.iter().enumerate() {
            if k.row >= rows || k.col >= cols {
                return Err(PggaError::InvalidArgument(format!(
                    "keypoint {i} at ({}, {}) outside {rows}×{cols} grid",
                    k.row, k.col
                )));
            }
        }
        Ok(Self { entries, rows, cols })
    }

    pub fn get(&self, part: Part) -> Keypoint {
        self.entries[part.index()]
    }

    pub fn flipped(&self) -> KeypointSet {
        let mut entries = self.entries;
        for part in Part::ALL {
            let k = self.entries[part.index()];
            entries[part.mirrored().index()] = Keypoint {
                col: self.cols - 1 - k.col,
                ..k
            };
        }
        KeypointSet {
            entries,
            rows: self.rows,
            cols: self.cols,
        }
    }
}

/// Per-channel argmax (first in row-major order on ties); the confidence is
/// the peak value.
pub fn extract_keypoints(h: &Heatmap) -> KeypointSet {
    let w = h.cols();
    let entries = std::array::from_fn(|p| {
        let ch = h.channel(p);
        let mut best = 0;
        for (i, &v) in ch.iter().enumerate() {
            if v > ch[best] {
                best = i;
            }
        }
        Keypoint {
            row: best / w,
            col: best % w,
            conf: ch[best],
        }
    });
    KeypointSet {
        entries,
        rows: h.rows(),
        cols: w,
    }
}
