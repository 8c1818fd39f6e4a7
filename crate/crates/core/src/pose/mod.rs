//! Keypoints and attention masks derived from pose heatmaps.

pub mod io;
pub mod keypoints;
pub mod masks;

pub use keypoints::{extract_keypoints, Heatmap, Keypoint, KeypointSet, Part, NUM_PARTS};
pub use masks::{coarse_mask, coarse_region, downsample_mask, fine_masks, square_area, AttentionMask, CellRect, MaskParams};
