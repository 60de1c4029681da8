//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("vocabulary error: {0}")]
    Vocabulary(String),

    #[error("sequence of length {len} exceeds maximum {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite values produced by {op}")]
    NonFinite { op: String },

    #[error("training diverged: loss component `{component}` is not finite")]
    DivergedLoss { component: String },

    #[error("unknown category `{0}`")]
    UnknownCategory(String),

    #[error("unknown parameter `{0}`")]
    MissingParam(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("file format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
