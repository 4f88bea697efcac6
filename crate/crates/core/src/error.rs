use std::path::PathBuf;

/// Errors produced by the library.
#[derive(Debug, thiserror::Error)]
pub enum GqeError {
    /// Malformed or out-of-range input.
    #[error("input error: {0}")]
    Input(String),
    /// Request exceeds what an operation supports (e.g. too many qubits).
    #[error("capability error: {0}")]
    Capability(String),
    /// Non-finite values in a computation.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// No preference pair can be formed from the samples.
    #[error("empty preference batch: {0}")]
    EmptyBatch(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, GqeError>;

impl GqeError {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        GqeError::Input(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GqeError::Io {
            path: path.into(),
            source,
        }
    }
}
