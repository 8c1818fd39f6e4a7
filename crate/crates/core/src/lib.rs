pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod network;
pub mod pose;
pub mod suite;
pub mod tensor;
pub mod train;

pub use error::{PggaError, Result};
pub use tensor::Tensor;
