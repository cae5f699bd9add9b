use std::path::PathBuf;

use thiserror::Error;

use crate::types::ItemId;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("item {item} at position {position} is outside the catalog")]
    OutOfCatalog { item: u32, position: usize },

    #[error("empty interaction sequence")]
    EmptySequence,

    #[error("sequence of length {len} is too short (need at least 3)")]
    TooShort { len: usize },

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },

    #[error("no scores to calibrate on")]
    EmptyScores,

    #[error("error rate alpha must lie in (0, 1), got {0}")]
    InvalidAlpha(f64),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("relaxation temperature must be positive, got {0}")]
    NonPositiveTau(f64),

    #[error("embedding of item {0:?} has zero norm")]
    ZeroNormEmbedding(ItemId),

    #[error("non-finite loss at epoch {epoch} ({what})")]
    DivergenceDetected { epoch: usize, what: &'static str },

    #[error("mini-batch has no calibration users")]
    EmptyCalibrationBatch,

    #[error("no users are eligible for evaluation")]
    NoEligibleUsers,

    #[error("malformed row at line {line}: {reason}")]
    MalformedRow { line: usize, reason: String },

    #[error("timestamp at line {line} cannot be ordered: {raw:?}")]
    UnsortableTimestamps { line: usize, raw: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("bad file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors that come from the input data rather than usage.
    pub fn is_data_error(&self) -> bool {
        !matches!(self, Error::DivergenceDetected { .. } | Error::Config(_))
    }
}
