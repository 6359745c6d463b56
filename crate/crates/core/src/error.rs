use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the harness.
#[derive(Debug, Error)]
pub enum Error {
    /// A state or loss became non-finite.
    #[error("numerical divergence in {context} at step {step}")]
    Divergence { context: String, step: usize },

    /// Gradient descent produced a non-finite loss.
    #[error("training diverged at epoch {epoch}; try a smaller learning rate (currently {learning_rate})")]
    TrainingDivergence { epoch: usize, learning_rate: f64 },

    /// The closed-loop prediction left the finite domain.
    #[error("closed-loop trajectory escaped at step {step}")]
    TrajectoryEscape { step: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("ridge system is singular at lambda = {lambda}; use lambda > 0")]
    RankDeficient { lambda: f64 },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than numerics.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Format(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
