//! Dense tensor arithmetic with reverse-mode differentiation, SGD, and a
//! finite-difference gradient checker.

pub mod gradcheck;
pub mod graph;
pub(crate) mod kernels;
pub mod ops;
pub mod optim;
pub mod params;

pub use gradcheck::{finite_diff_check, GradCheckConfig, GradCheckReport};
pub use graph::{Gradients, Graph, NodeId};
pub use ops::{BnState, Mode, PoolMode};
pub use optim::{sgd_step, OptimizerState};
pub use params::Params;
