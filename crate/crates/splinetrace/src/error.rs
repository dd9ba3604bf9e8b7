//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A precondition on input values was violated.
    #[error("domain error: {0}")]
    Domain(String),

    /// Tensor shapes do not conform for an operation.
    #[error("shape error in {op}: {msg}")]
    Shape { op: String, msg: String },

    /// Least-squares fitting failed; carries a conditioning diagnostic.
    #[error("fit error: {msg} (pivot magnitude {pivot:.3e})")]
    Fit { msg: String, pivot: f64 },

    /// A numeric value became non-finite where it must not.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Malformed or unreadable checkpoint file.
    #[error("bad checkpoint header: {0}")]
    Checkpoint(String),

    /// Malformed image or dataset file.
    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn shape(op: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Shape {
            op: op.into(),
            msg: msg.into(),
        }
    }
}
