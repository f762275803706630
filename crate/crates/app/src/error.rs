use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AppError {
    #[error(transparent)]
    Core(#[from] promise_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint frozen-content hash mismatch: header {expected}, contents {found}")]
    HashMismatch { expected: String, found: String },
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("image: {0}")]
    Image(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Usage(String),
    #[error("gradient check failed: {0}")]
    GradCheck(String),
}

impl AppError {
    /// Stable machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            AppError::Core(e) => match e {
                promise_core::Error::Config(_) => "config",
                promise_core::Error::Prompt(_) => "prompt",
                promise_core::Error::Input(_) | promise_core::Error::InsufficientPixels { .. } => "input",
                promise_core::Error::FrozenHashViolation { .. } => "frozen-hash",
                _ => "compute",
            },
            AppError::Io { .. } => "io",
            AppError::Checkpoint(_) | AppError::HashMismatch { .. } => "checkpoint",
            AppError::Dataset(_) => "dataset",
            AppError::Image(_) => "image",
            AppError::Json(_) => "json",
            AppError::Usage(_) => "usage",
            AppError::GradCheck(_) => "gradcheck",
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        AppError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, AppError>;
