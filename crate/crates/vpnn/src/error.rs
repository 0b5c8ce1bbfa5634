use thiserror::Error;

use crate::optim::TrainReport;

pub type Result<T> = std::result::Result<T, Error>;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("rank-deficient input: row {row} residual norm {residual:.3e}")]
    RankDeficient { row: usize, residual: f64 },
    #[error("invalid denominator {value}: must be positive")]
    InvalidDenominator { value: f64 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("class index {index} out of range for {len} outputs")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("forward cache does not match model: {0}")]
    CacheMismatch(String),
    #[error("invalid parameter locator: {0}")]
    LocatorInvalid(String),
    #[error("point lies in the activation guard region: pair {pair}, |u|+|v| = {magnitude:.3e}")]
    GuardRegion { pair: usize, magnitude: f64 },
    #[error("training diverged at epoch {epoch}: mean loss not finite")]
    Divergence {
        epoch: usize,
        /// Records for the epochs that completed before the abort.
        report: Box<TrainReport>,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("format error at byte {offset}: {what}")]
    Format { offset: u64, what: String },
    #[error("corrupt model: {0}")]
    CorruptModel(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}
