use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("raster error on {path}: {message}")]
    Raster { path: PathBuf, message: String },

    #[error("label error: {0}")]
    Label(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("dataset is empty: {0}")]
    EmptyDataset(String),

    #[error("initialization error: {0}")]
    Init(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("nothing to evaluate: {0}")]
    EmptyEval(String),

    #[error("training diverged at iteration {iter}: {message}")]
    Diverged {
        iter: usize,
        message: String,
        last_checkpoint: Option<PathBuf>,
    },

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("serialization error: {0}")]
    Serde(String),

    #[error("output root is locked by another command: {0}")]
    Locked(PathBuf),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable identifier, also used as the FFI error code name.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "ShapeError",
            Error::Io { .. } => "IoError",
            Error::Raster { .. } => "IoError",
            Error::Label(_) => "LabelError",
            Error::Config(_) => "ConfigError",
            Error::EmptyDataset(_) => "EmptyDatasetError",
            Error::Init(_) => "InitError",
            Error::Index(_) => "IndexError",
            Error::Numerical(_) => "NumericalError",
            Error::Schedule(_) => "ScheduleError",
            Error::EmptyEval(_) => "EmptyEvalError",
            Error::Diverged { .. } => "DivergedError",
            Error::Consistency(_) => "ConsistencyError",
            Error::Checkpoint(_) => "CheckpointError",
            Error::Serde(_) => "SerializationError",
            Error::Locked(_) => "LockError",
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
