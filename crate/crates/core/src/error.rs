//! Error types shared across the crate.

use thiserror::Error;

/// Errors produced by data ingestion, estimation, and identification.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("not identifiable: {0}")]
    NotIdentifiable(String),

    #[error("positivity violation: {0}")]
    Positivity(String),

    #[error("overlap violation: {0}")]
    Overlap(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("estimation failed: {0}")]
    Estimation(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
