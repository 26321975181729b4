use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{source_name}:{line}: {message}")]
    Parse {
        source_name: String,
        line: usize,
        message: String,
    },

    #[error("{source_name}:{line}: query references unknown table id {id:?}")]
    DanglingTable {
        source_name: String,
        line: usize,
        id: String,
    },

    #[error("invalid table {table_id:?}: {message}")]
    InvalidTable { table_id: String, message: String },

    #[error("invalid example {example_id}: {message}")]
    InvalidExample { example_id: String, message: String },

    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("softmax mask selects no entries")]
    EmptyMask,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("{what} index {index} out of range (len {len})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training aborted: non-finite loss at epoch {epoch}, batch {batch}, example {example_id}")]
    TrainingAborted {
        epoch: usize,
        batch: usize,
        example_id: String,
    },

    #[error("run {run:?} failed: {source}")]
    Experiment {
        run: String,
        #[source]
        source: Box<Error>,
    },

    #[error("checkpoint {}: {source}", path.display())]
    Checkpoint {
        path: PathBuf,
        #[source]
        source: CheckpointError,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Checkpoint decoding failures, one variant per failure class.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("file is truncated")]
    Truncated,
    #[error("vocabulary digest mismatch")]
    VocabDigestMismatch,
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CheckpointError {
    /// Stable numeric code per failure class.
    pub fn code(&self) -> u8 {
        match self {
            CheckpointError::BadMagic(_) => 1,
            CheckpointError::VersionMismatch { .. } => 2,
            CheckpointError::Truncated => 3,
            CheckpointError::VocabDigestMismatch => 4,
            CheckpointError::Corrupt(_) => 5,
            CheckpointError::Io(_) => 6,
        }
    }
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by numerical blow-up rather than bad input.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::NonFinite(_) | Error::TrainingAborted { .. } => true,
            Error::Experiment { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}
