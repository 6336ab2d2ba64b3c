//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CitrasError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("softmax row {row} is fully masked")]
    DegenerateMask { row: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("objective is not deterministic: two forward passes returned {first} and {second}")]
    Determinism { first: f64, second: f64 },

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("ingestion error at row {row}, column {column}: {reason}")]
    Ingestion {
        row: usize,
        column: String,
        reason: String,
    },

    #[error("split sizes sum to {requested} but the frame has {available} rows")]
    Split { requested: usize, available: usize },

    #[error("{what} = {len} is not divisible by patch length {patch}")]
    Divisibility {
        what: &'static str,
        len: usize,
        patch: usize,
    },

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error(
        "recursive forecasting with observed covariates requires horizon <= patch length \
         (got S={horizon}, P={patch}): future observed values are unavailable"
    )]
    UnsupportedRecursion { horizon: usize, patch: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CitrasError>;

impl CitrasError {
    /// Process exit code for the CLI: 1 for configuration/validation
    /// problems, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CitrasError::Config(_) | CitrasError::Manifest(_) => 1,
            _ => 2,
        }
    }
}
