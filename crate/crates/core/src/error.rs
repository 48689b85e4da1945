use std::io;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("vector norm below 1e-12{}", .frame.map(|f| format!(" at frame {f}")).unwrap_or_default())]
    ZeroNorm { frame: Option<usize> },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },

    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("too few points for clustering: need at least {required}, have {available}")]
    TooFewPoints { required: usize, available: usize },

    #[error("codebook index {index} out of range for {size} centers")]
    IndexOutOfRange { index: usize, size: usize },

    #[error("backward pass requested but the forward pass kept no cache")]
    MissingCache,

    #[error("evaluation split is empty")]
    EmptySplit,

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
