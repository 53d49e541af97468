use thiserror::Error;

#[derive(Debug, Error)]
pub enum VfmError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("empty cavity: {0}")]
    EmptyCavity(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("architecture mismatch: expected layer sizes {expected:?}, found {found:?}")]
    ArchitectureMismatch {
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("malformed file: {0}")]
    Parse(String),

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("optimization aborted: {0}")]
    Optimization(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, VfmError>;
