use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("visibility mask is empty: {0}")]
    DegenerateVisibility(String),

    #[error("optimizer diverged in {stage} at level {level}: {detail}")]
    Divergence {
        stage: &'static str,
        level: usize,
        detail: String,
    },

    #[error("scene is not renderable: {0}")]
    Scene(String),

    #[error("{path}: {reason}")]
    File { path: PathBuf, reason: String },

    #[error("malformed PFM {path} at byte {offset}: {reason}")]
    Pfm {
        path: PathBuf,
        offset: usize,
        reason: String,
    },

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn file(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        Error::File {
            path: path.into(),
            reason: reason.to_string(),
        }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// The innermost stage name, if the error was raised inside an experiment stage.
    pub fn stage(&self) -> Option<&'static str> {
        match self {
            Error::Stage { stage, .. } => Some(stage),
            _ => None,
        }
    }
}
