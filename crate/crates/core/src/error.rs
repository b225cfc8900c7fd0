use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::dataio::DataError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("config error: {0}")]
    Config(String),
    #[error("training data error: {0}")]
    TrainingData(String),
    #[error("labels required: {0}")]
    LabelsRequired(String),
    #[error("non-finite loss {value} in batch {batch}")]
    NonFiniteLoss { batch: usize, value: f64 },
    #[error("incompatible checkpoint and corpus: {0}")]
    Compatibility(String),
    #[error("unknown conversation id `{0}`")]
    UnknownConversation(String),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code: 1 usage/config, 2 data, 3 numeric/verification.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Tensor(TensorError::Config(_)) | Error::Tensor(TensorError::Usage(_)) => 1,
            Error::Data(DataError::Spec(_)) => 1,
            Error::Data(_)
            | Error::Checkpoint(_)
            | Error::TrainingData(_)
            | Error::LabelsRequired(_)
            | Error::Compatibility(_)
            | Error::UnknownConversation(_)
            | Error::Io { .. } => 2,
            Error::Tensor(_) | Error::NonFiniteLoss { .. } | Error::Verification(_) => 3,
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}
