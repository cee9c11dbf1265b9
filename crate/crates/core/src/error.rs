use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {left} vs {right}")]
    Shape { left: usize, right: usize },

    #[error("support error: q[{index}] = 0 while p[{index}] = {p} > 0")]
    Support { index: usize, p: f64 },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("insufficient data: need at least {needed}, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("constraint violated: {0}")]
    Constraint(String),

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("conflict: {0}")]
    Conflict(String),

    #[error("out of range: {0}")]
    Range(String),

    #[error("detection failed: {0}")]
    Detection(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
