use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("state error: {0}")]
    State(String),

    #[error("format error in {}: {reason}", path.display())]
    Format { path: PathBuf, reason: String },

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("training diverged at epoch {epoch}, batch {batch} (loss = {loss})")]
    Training { epoch: usize, batch: usize, loss: f64 },

    #[error("soft-target cache has no entry for sample {0}")]
    CacheMiss(usize),

    #[error("stale soft-target cache: built for teacher {cached:016x}, used with {actual:016x}")]
    StaleCache { cached: u64, actual: u64 },

    #[error("sample {sample} has label {label}, outside the task subset {classes:?}")]
    TaskSubsetViolation {
        sample: usize,
        label: usize,
        classes: Vec<usize>,
    },

    #[error("analysis error: {0}")]
    Analysis(String),

    #[error("CSV error on {}: {source}", path.display())]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the failure comes from input data or file contents rather than
    /// from training or caller misuse.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Format { .. } | Error::Io { .. } | Error::Csv { .. } | Error::StaleCache { .. }
        )
    }
}
