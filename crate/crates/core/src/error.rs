use thiserror::Error;

/// Errors raised by the numerical core.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("point outside the closed half-space: x_d = {0}")]
    OutsideHalfSpace(f64),

    #[error("invalid parameter {name}: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("matrix is not positive definite (pivot {pivot:e} at row {row})")]
    NotPositiveDefinite { row: usize, pivot: f64 },

    #[error("coefficient evaluation produced a non-finite value at t = {t}, x = {x:?}")]
    Evaluation { t: f64, x: Vec<f64> },

    #[error("ensemble carries no driver records")]
    MissingDriverRecords,

    #[error("masked fraction {fraction:.3} exceeds cap {cap:.3}")]
    ExcessiveMasking { fraction: f64, cap: f64 },

    #[error("PSD clip magnitude {magnitude:e} exceeds budget {budget:e}")]
    ClipBudgetExceeded { magnitude: f64, budget: f64 },

    #[error("time {0} is not a node of both grids")]
    TimeNotOnGrid(f64),

    #[error("linear solve failed: {0}")]
    LinearSolve(String),

    #[error("test function lacks {0}")]
    MissingEvaluator(&'static str),

    #[error("test function derivative self-check failed: {0}")]
    DerivativeCheck(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("malformed file: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;
