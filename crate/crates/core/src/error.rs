use thiserror::Error;
use twinseg_tensor::{Incompatibility, TensorError};

use crate::fed::checkpoint::CheckpointError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("model config: {0}")]
    ModelConfig(String),

    #[error("data: {0}")]
    Data(String),

    #[error("training: {0}")]
    Training(String),

    #[error("aggregation: incompatible stores at {0}")]
    Incompatible(Incompatibility),

    #[error("aggregation: {0}")]
    Aggregation(String),

    #[error("metrics: {0}")]
    Metrics(String),

    #[error("config field `{path}`: {msg}")]
    Config { path: String, msg: String },

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn config(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
