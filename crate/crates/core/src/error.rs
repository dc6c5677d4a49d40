use thiserror::Error;

/// Errors raised by the clustering pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum PppError {
    #[error("degenerate selection: {0}")]
    DegenerateSelection(String),
    #[error("index {index} out of bounds for universe of size {universe}")]
    IndexOutOfBounds { index: usize, universe: usize },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },
    #[error("degenerate model: {0}")]
    DegenerateModel(String),
    #[error("covariance of component {component} is not positive definite")]
    SingularCovariance { component: usize },
    #[error("degenerate split: {0}")]
    DegenerateSplit(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("i/o error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, PppError>;

impl From<std::io::Error> for PppError {
    fn from(e: std::io::Error) -> Self {
        PppError::Io(e.to_string())
    }
}

impl From<csv::Error> for PppError {
    fn from(e: csv::Error) -> Self {
        PppError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for PppError {
    fn from(e: serde_json::Error) -> Self {
        PppError::Io(e.to_string())
    }
}
