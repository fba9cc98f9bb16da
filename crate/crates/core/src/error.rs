use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("invalid backbone spec: {0}")]
    InvalidSpec(String),

    #[error("unknown backbone preset `{0}`")]
    UnknownPreset(String),

    #[error("invalid stage plan: {0}")]
    InvalidPlan(String),

    #[error("stage index {k} out of range 1..={num_stages}")]
    StageOutOfRange { k: usize, num_stages: usize },

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("backward called on {0} without a preceding training forward pass")]
    NoForwardCache(&'static str),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint does not match the requested network: {0}")]
    CheckpointMismatch(String),

    #[error("dataset error: {0}")]
    Data(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("non-finite loss {loss} at stage {stage}, epoch {epoch}, batch {batch}")]
    NonFiniteLoss {
        stage: usize,
        epoch: usize,
        batch: usize,
        loss: f64,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(
        context: impl Into<String>,
        expected: impl std::fmt::Debug,
        actual: impl std::fmt::Debug,
    ) -> Self {
        Error::Shape {
            context: context.into(),
            expected: format!("{expected:?}"),
            actual: format!("{actual:?}"),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
