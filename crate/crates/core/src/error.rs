//! Error types shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Top-level error. Variants map onto the CLI exit-code classes:
/// configuration errors, data errors (shape/domain/format/I/O) and
/// numerical failures.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or image extents do not fit the operation.
    #[error("shape error: {0}")]
    Shape(String),
    /// A value is outside the operation's domain (negative amplitude,
    /// non-binary label, ...).
    #[error("domain error: {0}")]
    Domain(String),
    /// Invalid or inconsistent configuration before any work starts.
    #[error("configuration error: {0}")]
    Config(String),
    /// Metric computation over an empty or degenerate pixel set.
    #[error("evaluation error: {0}")]
    Eval(String),
    /// Checkpoint serialization problems, each kind distinct.
    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] CheckpointError),
    /// PGM parsing/writing problems, each kind distinct.
    #[error("pgm error: {0}")]
    Pgm(#[from] PgmError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    /// Non-finite loss or similar numerical breakdown.
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic (not a checkpoint file)")]
    BadMagic,
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("file truncated while reading {0}")]
    Truncated(String),
    #[error("unknown tensor '{0}' not in the parameter roster")]
    UnknownTensor(String),
    #[error("missing tensor '{0}' required by the parameter roster")]
    MissingTensor(String),
    #[error("duplicate tensor '{0}'")]
    DuplicateTensor(String),
    #[error("tensor '{name}' has dims {got:?}, expected {expected:?}")]
    DimsMismatch {
        name: String,
        got: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("trailing bytes after the last tensor")]
    TrailingBytes,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum PgmError {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("unsupported magic '{0}' (only binary P5 is supported)")]
    UnsupportedMagic(String),
    #[error("unsupported maxval {0}")]
    UnsupportedMaxval(u32),
    #[error("image dimensions {0}x{1} overflow the supported size")]
    DimensionOverflow(u64, u64),
    #[error("payload truncated: expected {expected} bytes, got {got}")]
    Truncated { expected: usize, got: usize },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}
