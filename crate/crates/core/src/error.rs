use std::io;

/// Errors raised anywhere in the lab.
#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("training diverged at step {step}: loss = {loss}")]
    Training { step: usize, loss: f64 },
    #[error("scoring error: {0}")]
    Scoring(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl LabError {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        LabError::Domain(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        LabError::Config(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        LabError::Data(msg.into())
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        LabError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Whether this error stems from bad configuration rather than a failed run.
    pub fn is_config(&self) -> bool {
        matches!(self, LabError::Config(_) | LabError::Json(_))
    }
}

pub type Result<T> = std::result::Result<T, LabError>;
