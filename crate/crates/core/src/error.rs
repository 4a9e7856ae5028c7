use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by the library. Each variant maps onto one of three broad
/// categories (configuration, data, numerical) used for process exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("KPI column {0:?} not found in header")]
    MissingKpi(String),

    #[error("row {row} has {found} fields, header has {expected}")]
    RaggedRow {
        row: usize,
        expected: usize,
        found: usize,
    },

    #[error("row {row}, column {column:?}: cannot parse {value:?} as a finite number")]
    BadCell {
        row: usize,
        column: String,
        value: String,
    },

    #[error("invalid data: {0}")]
    Data(String),

    #[error("series {name:?} of length {len} is too short: {reason}")]
    TooShort {
        name: String,
        len: usize,
        reason: String,
    },

    #[error("series {0:?} is constant")]
    ConstantSeries(String),

    #[error("no embedding dimension up to {e_max} brings every FNN fraction below {threshold}")]
    NoEmbeddingDim { e_max: usize, threshold: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

/// Coarse error category, used for CLI exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numerical,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Config,
            Error::Io { .. }
            | Error::Csv(_)
            | Error::Json(_)
            | Error::MissingKpi(_)
            | Error::RaggedRow { .. }
            | Error::BadCell { .. }
            | Error::Data(_)
            | Error::TooShort { .. }
            | Error::ConstantSeries(_) => ErrorKind::Data,
            Error::NoEmbeddingDim { .. } | Error::Numerical(_) => ErrorKind::Numerical,
            Error::Stage { source, .. } => source.kind(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
