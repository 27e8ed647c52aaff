use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
///
/// Variants split into two families: input problems (bad files, schema
/// violations, invalid arguments) and computation failures (non-finite
/// values, solvers running out of budget). The CLI maps the first family to
/// exit code 2 and the second to exit code 1.
#[derive(Debug, Error)]
pub enum SwslError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {actual}{}", context_suffix(.context))]
    DimensionMismatch {
        expected: usize,
        actual: usize,
        context: Option<String>,
    },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("solver did not converge: {0}")]
    NoConvergence(String),
}

fn context_suffix(context: &Option<String>) -> String {
    match context {
        Some(c) => format!(" ({c})"),
        None => String::new(),
    }
}

impl SwslError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SwslError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        SwslError::Parse {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn dim(expected: usize, actual: usize) -> Self {
        SwslError::DimensionMismatch {
            expected,
            actual,
            context: None,
        }
    }

    pub fn dim_in(expected: usize, actual: usize, context: impl Into<String>) -> Self {
        SwslError::DimensionMismatch {
            expected,
            actual,
            context: Some(context.into()),
        }
    }

    /// True for errors caused by the caller's input rather than by the numerics.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            SwslError::Io { .. }
                | SwslError::Parse { .. }
                | SwslError::InvalidData(_)
                | SwslError::InvalidArgument(_)
                | SwslError::DimensionMismatch { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, SwslError>;
