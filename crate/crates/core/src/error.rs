use std::io;

use thiserror::Error;

pub type Result<T, E = PggaError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum PggaError {
    #[error("{op}: shape mismatch, expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("batch norm `{0}` has no running statistics; run at least one training step first")]
    BnNotReady(String),

    #[error("model is in training mode; switch to eval before extracting descriptors")]
    TrainMode,

    #[error("computation record is not topologically ordered at node {node} (input {input})")]
    CyclicRecord { node: usize, input: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("malformed {kind} data: {msg}")]
    Format { kind: &'static str, msg: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl PggaError {
    pub(crate) fn shape(op: &'static str, expected: impl Into<String>, got: impl Into<String>) -> Self {
        PggaError::Shape {
            op,
            expected: expected.into(),
            got: got.into(),
        }
    }

    pub(crate) fn format(kind: &'static str, msg: impl Into<String>) -> Self {
        PggaError::Format {
            kind,
            msg: msg.into(),
        }
    }
}
