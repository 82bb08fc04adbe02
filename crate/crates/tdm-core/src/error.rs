use std::path::PathBuf;

/// Error type shared by every module in the crate.
#[derive(Debug, thiserror::Error)]
pub enum TdmError {
    #[error("io error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at {path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("dataset is empty after filtering (min item frequency {min_item_freq}, min sequence length {min_seq_len})")]
    EmptyDataset {
        min_item_freq: usize,
        min_seq_len: usize,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("checkpoint format error at byte offset {offset}: {message}")]
    CheckpointFormat { offset: u64, message: String },

    #[error("training diverged at epoch {epoch}, step {step}: {message}")]
    Diverged {
        epoch: usize,
        step: u64,
        message: String,
    },

    #[error("scores undefined: {0}")]
    UndefinedScore(String),
}

pub type Result<T> = std::result::Result<T, TdmError>;

impl TdmError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TdmError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        TdmError::Config(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        TdmError::Usage(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        TdmError::Numeric(msg.into())
    }
}
