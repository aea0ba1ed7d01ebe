use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Inconsistent shapes, missing models or invalid hyperparameters.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    /// A malformed record in a line-oriented input. Lines are 1-based.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("integrity error in trajectory {traj_id} at step {t}: {message}")]
    Integrity {
        traj_id: i64,
        t: usize,
        message: String,
    },

    /// Non-finite losses or gradients, divergence.
    #[error("training fault: {0}")]
    TrainingFault(String),

    #[error("evaluation failed: {0}")]
    Evaluation(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn fault(msg: impl Into<String>) -> Self {
        Error::TrainingFault(msg.into())
    }

    /// True for errors caused by bad input or configuration rather than a
    /// runtime failure.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Dimension { .. }
                | Error::Parse { .. }
                | Error::Integrity { .. }
                | Error::Json(_)
        )
    }
}
