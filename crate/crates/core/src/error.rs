//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty set: {0}")]
    EmptySet(&'static str),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("degenerate configuration: {0}")]
    Degenerate(String),

    #[error("no correspondences within the distance threshold")]
    NoCorrespondences,

    #[error("no rigid consensus: best inlier set has {found} pairs, need at least {needed}")]
    NoRigidConsensus { found: usize, needed: usize },

    #[error("no motion: relative transform is within both the rotation and translation thresholds")]
    NoMotion,

    #[error("optimization diverged at iteration {iteration}: loss {loss:.6e} vs initial {initial:.6e}")]
    Diverged {
        iteration: usize,
        loss: f64,
        initial: f64,
    },

    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },

    #[error("unknown template: {0}")]
    UnknownTemplate(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error in field `{field}`: {message}")]
    Parse { field: String, message: String },

    #[error("pipeline stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Tag an error with the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
