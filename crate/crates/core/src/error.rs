use std::io;
use std::path::PathBuf;

use thiserror::Error;

use crate::numerics::checkpoint::CheckpointError;
use crate::numerics::{NumericsError, ParamStore};

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("invalid graph: {0}")]
    Graph(String),
    #[error("video `{video_id}`: field `{field}`: {msg}")]
    Record {
        video_id: String,
        field: String,
        msg: String,
    },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint is incompatible with the configuration: {0}")]
    Incompatible(String),
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("training diverged in epoch {epoch}: {cause} (parameters kept after {last_good_epoch} epochs)")]
    Diverged {
        epoch: usize,
        /// Number of epochs completed by `last_good`.
        last_good_epoch: usize,
        cause: String,
        last_good: Box<ParamStore>,
    },
}

impl Error {
    pub(crate) fn record(video_id: &str, field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Record {
            video_id: video_id.to_string(),
            field: field.into(),
            msg: msg.into(),
        }
    }

    /// True for errors caused by numerical breakdown rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteGradient(_)
                | Error::Diverged { .. }
                | Error::Numerics(NumericsError::NonFinite { .. })
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
