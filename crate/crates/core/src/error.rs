use thiserror::Error;

#[derive(Debug, Error)]
pub enum SsaError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("class {0} has no samples among the true labels")]
    MissingClass(usize),

    #[error("{models} models supplied for {folds} folds")]
    FoldMismatch { models: usize, folds: usize },

    #[error("sample {0} carries no attribute label")]
    MissingAttribute(usize),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SsaError>;

pub(crate) fn invalid(msg: impl Into<String>) -> SsaError {
    SsaError::InvalidConfig(msg.into())
}

/// A non-fatal condition recorded alongside a result.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Warning {
    pub stage: String,
    pub message: String,
}

impl Warning {
    pub fn new(stage: &str, message: impl Into<String>) -> Self {
        Self {
            stage: stage.to_string(),
            message: message.into(),
        }
    }
}

impl std::fmt::Display for Warning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{}] {}", self.stage, self.message)
    }
}
