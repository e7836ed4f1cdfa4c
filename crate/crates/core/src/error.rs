use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: String, found: String },

    #[error("zero-norm vector")]
    ZeroVector,

    #[error("empty batch")]
    EmptyBatch,

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("no exemplars available for projection memory update")]
    NoExemplars,

    #[error("buffer memory is empty")]
    EmptyMemory,

    #[error("schema error: {0}")]
    Schema(String),

    #[error("invalid synthetic stream spec: {0}")]
    Spec(String),

    #[error("task error: {0}")]
    Task(String),

    #[error("task {0} has no labeled data")]
    NoLabels(usize),

    #[error("task {0} is empty")]
    EmptyTask(usize),

    #[error("labels contain a single class; PR-AUC is undefined")]
    DegenerateLabels,

    #[error("AUT needs at least 2 points, got {0}")]
    InsufficientPoints(usize),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("bad file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dims(expected: impl ToString, found: impl ToString) -> Self {
        Error::DimMismatch {
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidMatrix(_) => "InvalidMatrix",
            Error::DimMismatch { .. } => "DimMismatch",
            Error::ZeroVector => "ZeroVector",
            Error::EmptyBatch => "EmptyBatch",
            Error::EmptyInput(_) => "EmptyInput",
            Error::NoExemplars => "NoExemplars",
            Error::EmptyMemory => "EmptyMemory",
            Error::Schema(_) => "SchemaError",
            Error::Spec(_) => "SpecError",
            Error::Task(_) => "TaskError",
            Error::NoLabels(_) => "NoLabels",
            Error::EmptyTask(_) => "EmptyTask",
            Error::DegenerateLabels => "DegenerateLabels",
            Error::InsufficientPoints(_) => "InsufficientPoints",
            Error::Config(_) => "ConfigError",
            Error::Format { .. } => "FormatError",
            Error::Io { .. } => "IoError",
            Error::Csv { .. } => "CsvError",
            Error::Json(_) => "JsonError",
        }
    }
}
