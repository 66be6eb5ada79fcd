use thiserror::Error;

/// Errors across the toolkit. The CLI maps these onto exit codes:
/// usage/config errors -> 1, data errors -> 2, numeric failures -> 3.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {op} got {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("degenerate softmax row {row}: every position is masked")]
    DegenerateRow { row: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// CLI exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::ShapeMismatch { .. } => 1,
            Error::Data(_) | Error::Parse { .. } | Error::Checkpoint(_) | Error::Io(_) | Error::Json(_) => 2,
            Error::DegenerateRow { .. } | Error::NonFinite(_) | Error::Numeric(_) => 3,
        }
    }
}
