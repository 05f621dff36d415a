use std::path::PathBuf;

/// Errors raised across the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("quantization error: {0}")]
    Quantization(String),
    #[error("incomplete state: {0}")]
    IncompleteState(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("undefined loss: {0}")]
    UndefinedLoss(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("evaluation unavailable: {0}")]
    EvaluationUnavailable(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("missing artifact {}: {hint}", path.display())]
    MissingArtifact { path: PathBuf, hint: String },
    #[error("digest mismatch: adapter was trained against generator {expected}, found {found}")]
    DigestMismatch { expected: String, found: String },
    #[error("i/o error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
