use crate::autodiff::{CheckpointError, TensorError};

/// Failures raised by the model-side modules (encoder, role learner,
/// decoder, trainer).
#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("config: {0}")]
    Config(String),
}

impl ModelError {
    pub fn contract(msg: impl Into<String>) -> Self {
        ModelError::Contract(msg.into())
    }
}

pub type ModelResult<T> = Result<T, ModelError>;
