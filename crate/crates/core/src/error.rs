//! Crate-wide error type.

use thiserror::Error;

/// Everything that can go wrong across the tensor core, pipelines,
/// attack engine, defenses and metrics.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    /// A public operation produced a NaN or infinity.
    #[error("numeric overflow: {0}")]
    NumericOverflow(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("index out of range in {context}: {index} >= {len}")]
    IndexOutOfRange {
        context: String,
        index: usize,
        len: usize,
    },

    #[error("bad magic number: expected {expected:#010x}, got {got:#010x}")]
    BadMagic { expected: u32, got: u32 },

    #[error("unsupported format version: expected {expected}, got {got}")]
    VersionMismatch { expected: u32, got: u32 },

    #[error("truncated stream while reading {0}")]
    Truncated(String),

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// Degenerate input to a statistical fit (e.g. all samples identical).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("iteration did not converge: {0}")]
    NonConvergence(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(context: impl Into<String>, expected: &[usize], got: &[usize]) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }
}
