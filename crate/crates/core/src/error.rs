use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RnaError {
    #[error("invalid long-tail spec: {0}")]
    InvalidSpec(String),

    #[error("class {class} has {available} samples but {requested} were requested")]
    InsufficientClass {
        class: usize,
        available: usize,
        requested: usize,
    },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid prior: {0}")]
    InvalidPrior(String),

    #[error("representation is the zero vector; gradient direction is undefined")]
    ZeroRepresentation,

    #[error("loss configuration needs OOD rows but the batch has none")]
    MissingOodRows,

    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    Diverged {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("i/o: {0}")]
    Io(String),
}

impl From<std::io::Error> for RnaError {
    fn from(e: std::io::Error) -> Self {
        RnaError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, RnaError>;
