use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("degenerate geometry: {0}")]
    Geometry(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("training: {0}")]
    Train(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
