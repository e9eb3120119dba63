use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: domain error: {message}")]
    Domain { op: &'static str, message: String },

    #[error("{op}: non-finite input")]
    NonFinite { op: &'static str },

    #[error("zero-norm embedding at {side} index {index}")]
    ZeroNorm { side: &'static str, index: usize },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("schema error at line {line}: {message}")]
    Schema { line: usize, message: String },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at step {step}; similarity matrix:\n{dump}")]
    NonFiniteLoss { step: usize, dump: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
