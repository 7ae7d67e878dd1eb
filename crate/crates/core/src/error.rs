use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("format error: {0}")]
    Format(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("parse error at row {row}: {detail}")]
    Parse { row: usize, detail: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("numerical error at leading minor {minor}: {detail}")]
    Numerical { minor: usize, detail: String },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("empty training set: {0}")]
    EmptyTrain(String),

    #[error("non-finite value at epoch {epoch} in term `{term}`")]
    NonFinite { epoch: usize, term: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable, machine-parseable category name.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Format(_) => "format",
            Error::Shape(_) => "shape",
            Error::Parse { .. } => "parse",
            Error::Domain(_) => "domain",
            Error::Numerical { .. } => "numerical",
            Error::Usage(_) => "usage",
            Error::EmptyTrain(_) => "empty_train",
            Error::NonFinite { .. } => "non_finite",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
