//! Crate-wide error type.

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two tensors fed to one operation disagree on shape.
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A NaN or infinity showed up where only finite values are valid.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// A caller broke a documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A configuration value is out of range or inconsistent.
    #[error("invalid config: {0}")]
    Config(String),

    /// A sentence index does not fit the allocated embedding table.
    #[error("sentence index {index} exceeds embedding capacity {capacity}")]
    SentenceCapacity { index: u32, capacity: usize },

    /// A sequence is longer than the positional encoding allows.
    #[error("sequence length {len} exceeds position capacity {capacity}")]
    PositionCapacity { len: usize, capacity: usize },

    /// A corpus or vocabulary file failed to parse.
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    /// A checkpoint file is malformed or from an incompatible build.
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}
