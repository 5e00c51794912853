use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch, {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },

    #[error("backward: loss must have exactly one element, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward: input #{index} (node {node}) is not reachable from the loss")]
    Unreachable { index: usize, node: usize },

    #[error("adam: missing gradient for parameter `{0}`")]
    MissingGradient(String),

    #[error("adam: gradient for `{name}` has shape {got:?}, expected {expected:?}")]
    GradientShape { name: String, expected: Vec<usize>, got: Vec<usize> },

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("duplicate parameter `{0}`")]
    DuplicateParameter(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
