//! Error types shared across the toolkit.

use thiserror::Error;

/// Errors produced by tensor operations, file formats and training loops.
#[derive(Debug, Error)]
pub enum CoreError {
    /// Incompatible shapes; the message names the operation and offending axes.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A documented precondition was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// File does not start with the expected magic bytes.
    #[error("{path}: bad magic {found:?}, expected {expected:?}")]
    BadMagic {
        path: String,
        found: [u8; 4],
        expected: [u8; 4],
    },

    /// File declares a format version this build does not understand.
    #[error("{path}: unknown format version {found:#04x}")]
    UnknownVersion { path: String, found: u8 },

    /// File ended before the declared payload was complete.
    #[error("{path}: truncated payload, needed {needed} more byte(s)")]
    Truncated { path: String, needed: usize },

    /// Malformed content inside an otherwise well-framed file.
    #[error("{path}: {detail}")]
    Format { path: String, detail: String },

    #[error("config line {line}: {detail}")]
    Config { line: usize, detail: String },

    /// Training loss left the finite range; carries the epoch for diagnosis.
    #[error("non-finite loss at epoch {epoch}: {detail}")]
    NonFiniteLoss { epoch: usize, detail: String },

    /// Weights file carries the wrong pipeline-stage tag.
    #[error("weights stage mismatch: expected {expected}, found {found}")]
    WrongStage { expected: String, found: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CoreError {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        CoreError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn contract(detail: impl Into<String>) -> Self {
        CoreError::Contract(detail.into())
    }
}
