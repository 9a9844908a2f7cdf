//! Error types shared across the workspace.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse classification used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Numeric,
    Data,
    Io,
    Internal,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("{context}: degenerate vector (norm {norm:e} below 1e-12)")]
    Degenerate { context: &'static str, norm: f64 },

    #[error("{context}: not a probability distribution (sum {sum})")]
    NotDistribution { context: &'static str, sum: f64 },

    #[error("data error: {0}")]
    Data(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) => ErrorClass::Config,
            Error::NonFinite { .. } | Error::Degenerate { .. } | Error::NotDistribution { .. } => {
                ErrorClass::Numeric
            }
            Error::Data(_) => ErrorClass::Data,
            Error::Io(_) | Error::Checkpoint(_) => ErrorClass::Io,
            Error::ShapeMismatch { .. } | Error::Usage(_) => ErrorClass::Internal,
        }
    }
}
