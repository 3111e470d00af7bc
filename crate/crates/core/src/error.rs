use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::Shape;

/// Failures raised by tensor kernels and the gradient tape.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: {dim} mismatch (expected {expected}, got {got})")]
    ShapeMismatch { op: &'static str, dim: &'static str, expected: String, got: String },

    #[error("data length {len} does not match shape {shape}")]
    DataLength { shape: Shape, len: usize },

    #[error("cannot reshape {from} into {to}")]
    Reshape { from: Shape, to: Shape },

    #[error("invalid convolution spec: {0}")]
    InvalidSpec(String),

    #[error("{0}")]
    Empty(&'static str),

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("backward requires a scalar loss, got shape {0}")]
    NotScalar(Shape),

    #[error("variable was not recorded on this tape")]
    ForeignVar,
}

impl TensorError {
    pub(crate) fn shape(op: &'static str, dim: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        TensorError::ShapeMismatch { op, dim, expected: expected.to_string(), got: got.to_string() }
    }

    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        TensorError::InvalidArgument { op, msg: msg.into() }
    }
}

/// Crate-level error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("invalid model config: {0}")]
    Config(String),

    #[error("config line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("image: {0}")]
    Image(String),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("training diverged at iteration {iter} (loss {loss}); last good checkpoint: {checkpoint:?}")]
    Diverged { iter: usize, loss: f64, checkpoint: Option<PathBuf> },

    #[error("{0}")]
    Invalid(String),

    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Short machine-readable category, used by the CLI's one-line errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Tensor(_) => "tensor",
            Error::Config(_) => "config",
            Error::Parse { .. } => "parse",
            Error::Checkpoint(_) => "checkpoint",
            Error::Image(_) => "image",
            Error::NonFiniteGradient(_) => "gradient",
            Error::Diverged { .. } => "diverged",
            Error::Invalid(_) => "invalid",
            Error::Io { .. } => "io",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
