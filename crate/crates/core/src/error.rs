use thiserror::Error;

#[derive(Debug, Error)]
pub enum HintError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("sequence too long: {len} tokens exceeds limit {max}")]
    Length { len: usize, max: usize },
    #[error("sequence too short: {len} tokens, need at least {min}")]
    TooShort { len: usize, min: usize },
    #[error("few-shot pool holds {available} examples, {requested} requested")]
    Pool { requested: usize, available: usize },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("incompatible file: {0}")]
    Version(String),
    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl HintError {
    /// Process exit code used by the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            HintError::Config(_) | HintError::Version(_) => 2,
            HintError::Divergence { .. } => 4,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, HintError>;
