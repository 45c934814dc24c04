use thiserror::Error;

#[derive(Debug, Error)]
pub enum QgError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("profile solver error: {0}")]
    Profile(String),

    #[error("elliptic solver error: {0}")]
    Elliptic(String),

    #[error("step size error: {0}")]
    StepSize(String),

    #[error("blow-up detected: {0}")]
    BlowUp(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, QgError>;
