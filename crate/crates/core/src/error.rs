use thiserror::Error;

pub type Result<T> = std::result::Result<T, CkdError>;

#[derive(Debug, Error)]
pub enum CkdError {
    #[error("invalid domain spec: {0}")]
    InvalidSpec(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: u32, size: usize },

    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),

    #[error("invalid probability distribution: {0}")]
    InvalidDistribution(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("model is frozen and cannot be updated")]
    Frozen,

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("malformed data: {0}")]
    Format(String),

    #[error("schema version mismatch: expected {expected}, found {found}")]
    Schema { expected: u32, found: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
