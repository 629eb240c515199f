use std::path::PathBuf;

use diffcompute::GraphError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("class {class} has no parameters (only {available} classes configured)")]
    MissingClass { class: usize, available: usize },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("{path}: {reason}")]
    File { path: PathBuf, reason: String },
    /// Training produced a non-finite loss; `last_good` holds the weights from
    /// the end of the last completed epoch.
    #[error("non-finite loss at epoch {epoch}")]
    Diverged { epoch: usize, last_good: Box<crate::unet::ModelWeights> },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn file(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        Error::File { path: path.into(), reason: reason.to_string() }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
