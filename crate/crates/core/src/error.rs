use std::path::PathBuf;

/// Errors produced by the audit engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("non-finite entry at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("NMF requires non-negative input (found {value} at row {row}, column {col})")]
    NegativeInput { row: usize, col: usize, value: f64 },

    #[error("rank {rank} out of range (must be in 1..={max})")]
    Rank { rank: usize, max: usize },

    #[error("{method} did not converge after {iterations} iterations")]
    NoConvergence { method: &'static str, iterations: usize },

    #[error("score is constant; indices undefined")]
    ConstantScore,

    #[error("{side} head: {source}")]
    Head {
        side: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("embedding provider: {0}")]
    Provider(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
