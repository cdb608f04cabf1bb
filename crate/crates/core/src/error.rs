use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum MorphError {
    #[error("{op}: shape mismatch on axis {axis}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        axis: String,
        expected: String,
        got: String,
    },
    #[error("{0}: invalid argument: {1}")]
    InvalidArgument(&'static str, String),
    #[error("{0}: non-finite value encountered")]
    NonFinite(&'static str),
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("precondition violated: {0}")]
    Domain(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, MorphError>;

pub(crate) fn shape_err(op: &'static str, axis: impl ToString, expected: impl ToString, got: impl ToString) -> MorphError {
    MorphError::Shape {
        op,
        axis: axis.to_string(),
        expected: expected.to_string(),
        got: got.to_string(),
    }
}
