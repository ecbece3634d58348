use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure class, used by front ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Malformed input data, bad shapes, unreadable files.
    Data,
    /// A linear system could not be solved.
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        found: usize,
    },

    #[error("invalid embedding `{label}`: {reason}")]
    InvalidEmbedding { label: String, reason: String },

    #[error("invalid projection matrix `{name}`: {reason}")]
    InvalidMatrix { name: String, reason: String },

    #[error("invalid layer set: {0}")]
    InvalidLayerSet(String),

    #[error("layer sets are misaligned at index {index}: {reason}")]
    Misaligned { index: usize, reason: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{matrix} is singular: rank {rank} of {dim} (rank defect {defect})", defect = dim - rank)]
    Singular {
        matrix: &'static str,
        dim: usize,
        rank: usize,
    },

    #[error("epoch {epoch}{}: {source}", task.as_ref().map(|t| format!(", task `{t}`")).unwrap_or_default())]
    Epoch {
        epoch: usize,
        task: Option<String>,
        #[source]
        source: Box<Error>,
    },

    #[error("oracle problem too large: embedding dimension {dim} exceeds cap {cap}")]
    OracleTooLarge { dim: usize, cap: usize },

    #[error("truncated tensor file: {0}")]
    Truncated(String),

    #[error("malformed tensor file header: {0}")]
    MalformedHeader(String),

    #[error("tensor `{name}` has out-of-range data offsets [{begin}, {end}) (payload is {payload} bytes)")]
    OffsetOutOfRange {
        name: String,
        begin: u64,
        end: u64,
        payload: u64,
    },

    #[error("tensor `{name}` has unsupported dtype `{dtype}`")]
    UnsupportedDtype { name: String, dtype: String },

    #[error("tensor `{0}` not found")]
    MissingTensor(String),

    #[error("selection pattern matched no tensors")]
    EmptySelection,

    #[error("selected tensor `{name}` is not 2-dimensional (shape {shape:?})")]
    NotMatrix { name: String, shape: Vec<usize> },

    #[error("tensor `{name}` shape drifted: file has {file:?}, edit has {edit:?}")]
    ShapeDrift {
        name: String,
        file: Vec<usize>,
        edit: Vec<usize>,
    },

    #[error("I/O error on {path}: {source}", path = path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Singular { .. } => ErrorClass::Numerical,
            Error::Epoch { source, .. } => source.class(),
            _ => ErrorClass::Data,
        }
    }

    pub(crate) fn dims(context: impl Into<String>, expected: usize, found: usize) -> Self {
        Error::DimensionMismatch {
            context: context.into(),
            expected,
            found,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_epoch(self, epoch: usize, task: Option<&str>) -> Self {
        Error::Epoch {
            epoch,
            task: task.map(str::to_owned),
            source: Box::new(self),
        }
    }
}
