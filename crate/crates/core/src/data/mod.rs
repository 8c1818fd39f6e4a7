//! Synthetic pedestrian data, augmentation and PK batch sampling.

pub mod augment;
pub mod io;
pub mod sampler;
pub mod synth;

pub use augment::{erase_augment, flip_augment, mirror_image, EraseParams};
pub use sampler::{pk_batch, PkSampler};
pub use synth::{generate_dataset, held_out, identity_spec, render, DatasetConfig, IdentitySpec, Sample};
