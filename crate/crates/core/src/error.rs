use thiserror::Error;

use crate::scene::Cell;

/// Errors raised across the inference pipeline.
#[derive(Debug, Error)]
pub enum AlmError {
    #[error("cell ({}, {}) lies outside the {width}x{height} lattice", .cell.x, .cell.y)]
    OutOfBounds { cell: Cell, width: usize, height: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("goal ({}, {}) is unreachable from ({}, {})", .goal.x, .goal.y, .start.x, .start.y)]
    Unreachable { start: Cell, goal: Cell },
    #[error("model error: {0}")]
    Model(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("prediction failed: {0}")]
    Prediction(String),
    #[error("metric error: {0}")]
    Metric(String),
    #[error("scene generation failed: {0}")]
    Generation(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = AlmError> = std::result::Result<T, E>;
