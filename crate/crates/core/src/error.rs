use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidShape { op: &'static str, msg: String },

    #[error("{op}: non-finite input")]
    NonFinite { op: &'static str },

    #[error("index {index} out of range for extent {bound}")]
    IndexOutOfRange { index: usize, bound: usize },

    #[error("backward: {0}")]
    Backward(String),

    #[error("column {column} has near-zero norm")]
    ZeroColumn { column: usize },

    #[error("degenerate pair ({i}, {j}): normalized neurons coincide")]
    DegeneratePair { i: usize, j: usize },

    #[error("adapter: {0}")]
    Adapter(String),

    #[error("model: {0}")]
    Model(String),

    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("response does not end with <eos>")]
    MissingEos,

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{path}:{line}: {msg}")]
    Data {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("non-finite gradient for parameter {0}")]
    NanGradient(String),

    #[error("non-finite loss at step {step}")]
    NanLoss { step: usize },

    #[error("checkpoint: {0}")]
    Format(String),

    #[error("checkpoint: unsupported version {0}")]
    UnsupportedVersion(u32),

    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// Stable short code for machine-readable reporting.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Data { .. } | Error::Empty(_) | Error::MissingEos | Error::SequenceTooLong { .. } => "data",
            Error::Io { .. } => "io",
            Error::Format(_) | Error::UnsupportedVersion(_) | Error::Json(_) | Error::Csv(_) => "format",
            Error::ArchitectureMismatch(_) => "architecture",
            Error::NonFinite { .. } | Error::NanGradient(_) | Error::NanLoss { .. } => "numeric",
            Error::ZeroColumn { .. } | Error::DegeneratePair { .. } => "energy",
            Error::Adapter(_) | Error::Model(_) => "model",
            Error::ShapeMismatch { .. }
            | Error::InvalidShape { .. }
            | Error::IndexOutOfRange { .. }
            | Error::Backward(_) => "internal",
        }
    }

    /// True for errors caused by user-supplied configuration rather than data or runtime state.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}
