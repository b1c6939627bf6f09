use thiserror::Error;

use crate::ddp::DdpSolution;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("solver diverged{}{}: {message}",
        .level.map(|l| format!(" at level {l}")).unwrap_or_default(),
        .outer_iteration.map(|k| format!(" in outer iteration {k}")).unwrap_or_default())]
    SolveDiverged {
        message: String,
        level: Option<usize>,
        outer_iteration: Option<usize>,
        /// Last valid iterate, when one exists.
        best: Option<Box<DdpSolution>>,
    },

    #[error("training diverged at epoch {epoch}")]
    TrainingDiverged { epoch: usize },

    #[error("iteration {iteration}: every open-loop solve failed ({failures} failures)")]
    IterationFailed { iteration: usize, failures: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn diverged(message: impl Into<String>, best: Option<DdpSolution>) -> Self {
        Error::SolveDiverged {
            message: message.into(),
            level: None,
            outer_iteration: None,
            best: best.map(Box::new),
        }
    }
}
