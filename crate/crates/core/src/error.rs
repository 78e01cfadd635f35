use coad_tensor::TensorError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, CoadError>;

#[derive(Debug, Error)]
pub enum CoadError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid data: {0}")]
    Validation(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training diverged at step {step}: loss is {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("dialogue: {0}")]
    Dialogue(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CoadError {
    pub fn validation(msg: impl Into<String>) -> Self {
        Self::Validation(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Self::Config(msg.into())
    }

    pub fn dialogue(msg: impl Into<String>) -> Self {
        Self::Dialogue(msg.into())
    }

    /// Bad input data, as opposed to a bad configuration or a runtime fault.
    pub fn is_data_error(&self) -> bool {
        matches!(self, Self::Parse { .. } | Self::Validation(_))
    }
}
