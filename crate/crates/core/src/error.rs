use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("timestep {t} out of range 1..={max}")]
    Timestep { t: usize, max: usize },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("vocabulary: {0}")]
    Vocab(String),
    #[error("mode/state mismatch: {0}")]
    Mode(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("data: {0}")]
    Data(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
