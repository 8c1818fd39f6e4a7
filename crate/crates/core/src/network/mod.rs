//! The pose-guided attention network and its graph attention module.

pub mod config;
pub mod layers;
pub mod model;
pub mod pga;
pub mod saga;

pub use config::{default_channel_alloc, Ablation, BackboneConfig, SagaActivation};
pub use model::{Forward, Model, Outputs, NUM_VECTORS};
pub use pga::MaskBatch;
pub use saga::{adjacency, edge_matrix, saga_apply, SagaOutput, SagaParams};
