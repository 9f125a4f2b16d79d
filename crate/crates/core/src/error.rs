use thiserror::Error;

/// Errors produced anywhere in the clustering pipeline.
#[derive(Debug, Error)]
pub enum SpiceError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },
    #[error("invalid label {label} (k = {k})")]
    InvalidLabel { label: usize, k: usize },
    #[error("config error: {0}")]
    Config(String),
    #[error("parse error at byte {offset}: {msg}")]
    BinaryParse { offset: u64, msg: String },
    #[error("parse error on line {line}: {msg}")]
    TextParse { line: usize, msg: String },
    #[error("unknown {kind} strategy `{name}` (available: {available})")]
    UnknownStrategy {
        kind: &'static str,
        name: String,
        available: String,
    },
    #[error("cluster starvation: clusters {clusters:?} have no reliable samples; the semi-supervised stage is inapplicable")]
    ClusterStarvation { clusters: Vec<usize> },
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = SpiceError> = std::result::Result<T, E>;

impl SpiceError {
    pub(crate) fn shape(expected: impl ToString, got: impl ToString) -> Self {
        SpiceError::Shape {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
