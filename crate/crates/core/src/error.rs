use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, ShmError>;

#[derive(Debug, Error)]
pub enum ShmError {
    /// A caller-supplied argument violates an operation precondition.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// The object is in a state where the operation is undefined.
    #[error("invalid state: {0}")]
    State(String),

    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("numeric failure in layer {layer}: {message}")]
    Layer { layer: usize, message: String },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// Upstream artifacts disagree (fingerprints, overlapping splits, malformed files).
    #[error("data error: {0}")]
    Data(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl ShmError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ShmError::Io {
            path: path.into(),
            source,
        }
    }

    /// Prefixes the message with `context`, keeping the error kind.
    pub fn context(self, context: &str) -> Self {
        match self {
            ShmError::Parameter(m) => ShmError::Parameter(format!("{context}: {m}")),
            ShmError::State(m) => ShmError::State(format!("{context}: {m}")),
            ShmError::Numeric(m) => ShmError::Numeric(format!("{context}: {m}")),
            ShmError::Config(m) => ShmError::Config(format!("{context}: {m}")),
            ShmError::Data(m) => ShmError::Data(format!("{context}: {m}")),
            ShmError::Layer { layer, message } => ShmError::Layer {
                layer,
                message: format!("{context}: {message}"),
            },
            other => other,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            ShmError::Config(_) | ShmError::Parameter(_) => 2,
            ShmError::Data(_)
            | ShmError::State(_)
            | ShmError::Io { .. }
            | ShmError::Json(_)
            | ShmError::NonFinite { .. } => 3,
            ShmError::Layer { .. } | ShmError::Numeric(_) => 4,
        }
    }
}
