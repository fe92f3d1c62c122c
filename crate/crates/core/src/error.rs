use std::path::PathBuf;

use thiserror::Error;

/// Every failure the library can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("trajectory expands to {len} rows, exceeding the {max}-row budget")]
    LengthOverflow { len: usize, max: usize },

    #[error("degenerate sample: {0}")]
    DegenerateSample(String),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("selection: {0}")]
    Selection(String),

    #[error("no trajectories long enough for cells {cells:?}")]
    Coverage { cells: Vec<(usize, usize)> },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
