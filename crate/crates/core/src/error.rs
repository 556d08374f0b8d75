use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("degenerate row {row}: every entry is masked")]
    DegenerateRow { row: usize },

    #[error("lookup index {index} out of range for table with {rows} rows")]
    Lookup { index: usize, rows: usize },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("sparsity error: {0}")]
    Sparsity(String),

    #[error("sequence error: {0}")]
    Sequence(String),

    #[error("invalid action {action} for agent {agent}")]
    Action { agent: usize, action: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unknown parameter `{0}`")]
    MissingParam(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
