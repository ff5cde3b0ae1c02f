use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the planning toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// An input violated an operation's precondition.
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// The expert planner exhausted its iteration budget.
    #[error("planning failed after {iterations} iterations")]
    PlanningFailed { iterations: usize },

    /// A bounded resampling loop ran out of attempts.
    #[error("resource exhausted: {0}")]
    Exhausted(String),

    /// Tensor or trajectory shapes disagree.
    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    /// Unknown enumerated option (schedule kind, split tag, ...).
    #[error("unknown {what}: {value}")]
    Unknown { what: &'static str, value: String },

    #[error("malformed checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
