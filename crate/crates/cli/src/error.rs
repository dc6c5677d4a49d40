use std::path::PathBuf;

use ppp_core::PppError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("cannot read {}: {reason}", path.display())]
    Input { path: PathBuf, reason: String },
    #[error("parse error at row {row}, column {column}: {value:?} is not a number")]
    Parse { row: usize, column: usize, value: String },
    #[error("format error: {0}")]
    Format(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("cannot write {}: {reason}", path.display())]
    Output { path: PathBuf, reason: String },
    #[error(transparent)]
    Pipeline(#[from] PppError),
}

impl CliError {
    /// 2 for anything the user can fix in the invocation or input, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Output { .. } => 1,
            CliError::Pipeline(e) => match e {
                PppError::Config(_) | PppError::Validation(_) => 2,
                _ => 1,
            },
            _ => 2,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
