use std::path::PathBuf;

use textpose_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed JSON at byte {offset}: {message}")]
    MalformedJson { path: PathBuf, offset: usize, message: String },

    #[error("{path}:{line}: {message}")]
    VectorFormat { path: PathBuf, line: usize, message: String },

    #[error("expected dimension {expected}, found {found}")]
    Dimension { expected: usize, found: usize },

    #[error("rotation of {0} degrees exceeds the 45 degree guard")]
    AngleOutOfRange(f64),

    #[error("{what} = {value} is outside [0, 1]")]
    OutOfUnitRange { what: &'static str, value: f64 },

    #[error("degenerate bounding box {0:?}")]
    DegenerateBox([f64; 4]),

    #[error("non-finite input to {0}")]
    NonFinite(&'static str),

    #[error("checkpoint: bad magic bytes")]
    BadMagic,

    #[error("checkpoint: architecture hash {found} does not match {expected}")]
    ArchitectureMismatch { expected: String, found: String },

    #[error("{0}: file is truncated")]
    Truncated(&'static str),

    #[error("{0}")]
    Format(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("need {needed} samples but the split has {available}")]
    InsufficientData { needed: usize, available: usize },

    #[error("sample {0} has no captions but the conditional phase needs them")]
    MissingCaptions(String),

    #[error("{0}: empty input set")]
    EmptySet(&'static str),

    #[error("{0}: misaligned inputs")]
    Misaligned(&'static str),

    #[error("synthetic classes are not separable: inter/intra distance ratio {ratio:.2} <= {required}")]
    NotSeparable { ratio: f64, required: f64 },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Errors caused by bad user input rather than a bug or I/O failure.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Io { .. } | Error::Tensor(_))
            || matches!(self, Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound)
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
