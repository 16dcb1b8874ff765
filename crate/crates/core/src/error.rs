use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("argument out of domain: {0}")]
    Domain(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("integration exceeded {0} steps")]
    MaxSteps(usize),
    #[error("resample rate {rate:.4} exceeds limit {limit}")]
    ResampleRate { rate: f64, limit: f64 },
    #[error("training aborted: {0}")]
    TrainingAborted(String),
    #[error("checkpoint format version mismatch: {0}")]
    VersionMismatch(String),
    #[error("checkpoint checksum failure: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("checkpoint truncated: {0}")]
    Truncated(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("quadrature failed: {0}")]
    Quadrature(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
