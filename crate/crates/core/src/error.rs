//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("row {row} has norm {norm:e}, too small to normalize")]
    ZeroRow { row: usize, norm: f64 },

    #[error("SVD did not converge after {sweeps} sweeps (off-diagonal residual {residual:e})")]
    NoConvergence { sweeps: usize, residual: f64 },

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("template {template:?} has {count} placeholders, expected exactly one")]
    BadTemplate { template: String, count: usize },

    #[error("text is empty after trimming")]
    EmptyText,

    #[error("adapter rank {rank} must be in 1..{limit}")]
    RankTooLarge { rank: usize, limit: usize },

    #[error("function returned a non-finite value at coordinate {coord}")]
    NonFinite { coord: usize },

    #[error("prototype matrix is rank deficient (smallest singular value {sigma_min:e})")]
    RankDeficient { sigma_min: f64 },

    #[error("loss diverged at epoch {epoch}, step {step}: total = {total:e}")]
    DivergedLoss { epoch: usize, step: usize, total: f64 },

    #[error("input rows are not flagged as unit norm")]
    NotNormalized,

    #[error("sample {sample} is assigned to {count} classes, expected exactly one")]
    EmptyAssignment { sample: usize, count: usize },

    #[error("confusion pattern has no spherical realization: {0}")]
    InfeasibleConfusion(String),

    #[error("class pool is empty: {0}")]
    EmptyClassPool(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite value in {path} at row {row}, column {col}")]
    NonFiniteInput { path: PathBuf, row: usize, col: usize },

    #[error("parse error in {path}, line {line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::ShapeMismatch { expected: expected.into(), got: got.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
