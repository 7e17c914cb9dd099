use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{file}: row {row}: {msg}")]
    Parse {
        file: PathBuf,
        row: usize,
        msg: String,
    },

    #[error("manifest {path}: {msg}")]
    Manifest { path: PathBuf, msg: String },

    #[error("inconsistent sample count: {what} has {found} rows, expected {expected}")]
    InconsistentSamples {
        what: String,
        expected: usize,
        found: usize,
    },

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate trial: {0}")]
    DegenerateTrial(String),

    #[error("matrix pencil is not definite: {0}")]
    PencilNotDefinite(String),

    #[error("degenerate component {0}: shared signal has zero norm")]
    DegenerateComponent(usize),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
