use thiserror::Error;

/// Errors raised across the co-exploration library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    Shape {
        node: usize,
        op: &'static str,
        detail: String,
    },

    #[error("invalid tensor: {0}")]
    Tensor(String),

    #[error("missing leaf value for `{0}`")]
    MissingLeaf(String),

    #[error("output node {node} is not scalar (shape {shape:?})")]
    NonScalarOutput { node: usize, shape: Vec<usize> },

    #[error("non-finite value produced at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed record at line {line}: {detail}")]
    Record { line: usize, detail: String },

    #[error("constraint gradient vanished while violated; update direction undefined")]
    ZeroConstraintGradient,

    #[error("search diverged at epoch {epoch}, step {step}: {detail}")]
    Diverged {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("estimator has not been pretrained")]
    Unpretrained,

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
