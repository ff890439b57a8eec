use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("vertex {vertex} is isolated (zero degree)")]
    IsolatedVertex { vertex: usize },

    #[error("eigensolver did not converge after {sweeps} sweeps (off-diagonal norm {off_norm:e}, residual {residual:e})")]
    NoConvergence {
        sweeps: usize,
        off_norm: f64,
        residual: f64,
    },

    #[error("stale forward trace: {0}")]
    StaleTrace(String),

    #[error("non-finite loss at step {step}")]
    Divergence { step: usize },

    #[error("invalid config key `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("class {class} has {available} samples, episode needs {needed}")]
    InsufficientClass {
        class: usize,
        available: usize,
        needed: usize,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<R> = std::result::Result<R, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn shape_mismatch(expected: impl Into<String>, actual: impl Into<String>) -> Error {
    Error::ShapeMismatch {
        expected: expected.into(),
        actual: actual.into(),
    }
}
