use perco_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },
    #[error("mismatch: {0}")]
    Mismatch(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, CodecError>;

pub(crate) fn format_err<T>(what: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(CodecError::Format {
        what,
        detail: detail.into(),
    })
}

pub(crate) fn invalid<T>(detail: impl Into<String>) -> Result<T> {
    Err(CodecError::Invalid(detail.into()))
}

pub(crate) fn mismatch<T>(detail: impl Into<String>) -> Result<T> {
    Err(CodecError::Mismatch(detail.into()))
}
