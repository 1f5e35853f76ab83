use std::path::PathBuf;

use crate::chunk::OperatorId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid coordinate: {0}")]
    InvalidCoordinate(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("element type mismatch: {0}")]
    TypeMismatch(String),

    #[error("allocation of {requested} bytes exceeds store capacity of {capacity} bytes")]
    AllocationTooLarge { requested: u64, capacity: u64 },

    #[error("memory budget exhausted: {0}")]
    MemoryExhausted(String),

    #[error("graph discipline violated: {0}")]
    GraphDiscipline(String),

    #[error("operator `{name}` ({id}) failed: {message}")]
    Operator {
        name: String,
        id: OperatorId,
        message: String,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },

    #[error("worker job failed: {0}")]
    Job(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn invalid(message: impl Into<String>) -> Self {
        Error::InvalidArgument(message.into())
    }
}
