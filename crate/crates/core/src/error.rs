use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoffeeError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("symbol {0} is not in the vocabulary")]
    UnknownSymbol(u32),

    #[error("induction-head configuration admits no valid sequence: {0}")]
    InfeasibleTask(String),

    #[error("IDX format error: {0}")]
    Idx(String),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u64, expected: u64 },

    #[error("checkpoint schema violation: {0}")]
    CheckpointSchema(String),

    #[error("checkpoint checksum mismatch: stored {stored}, computed {computed}")]
    CheckpointChecksum { stored: String, computed: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CoffeeError>;
