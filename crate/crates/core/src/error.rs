use std::path::PathBuf;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("cyclic graph: {}", .cycle.join(" -> "))]
    CyclicGraph { cycle: Vec<String> },

    #[error("unknown task index {index} (model has {tasks} tasks)")]
    TaskIndex { index: usize, tasks: usize },

    #[error("diverged at epoch {epoch}: {message}")]
    Diverged { epoch: usize, message: String },

    #[error("ingestion error in {file}:{line}: {message}")]
    Ingestion {
        file: String,
        line: usize,
        message: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("usage: {0}")]
    Usage(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable tag, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidSpec(_) => "invalid_spec",
            Error::Shape(_) => "shape",
            Error::Contract(_) => "contract",
            Error::CyclicGraph { .. } => "cyclic_graph",
            Error::TaskIndex { .. } => "task_index",
            Error::Diverged { .. } => "diverged",
            Error::Ingestion { .. } => "ingestion",
            Error::Checkpoint(_) => "checkpoint",
            Error::Usage(_) => "usage",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
