use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    /// Bad configuration or arguments; exit code 1.
    #[error("{0}")]
    Validation(String),

    /// A required artifact is absent; exit code 1.
    #[error("missing file {}: {hint}", path.display())]
    Missing { path: PathBuf, hint: String },

    #[error(transparent)]
    Core(#[from] cdp_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Validation(_) | HarnessError::Missing { .. } => 1,
            _ => 2,
        }
    }

    pub fn missing(path: impl Into<PathBuf>, hint: impl Into<String>) -> Self {
        HarnessError::Missing {
            path: path.into(),
            hint: hint.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
