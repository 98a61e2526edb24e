use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed label {label:?}: {reason}")]
    MalformedLabel { label: String, reason: String },
    #[error("invalid flag {0:?}: keys must start with --")]
    InvalidFlag(String),
    #[error("invalid value: {0}")]
    InvalidValue(String),
    #[error("invalid execution stats: {0}")]
    InvalidStats(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("unknown feature {0:?}")]
    UnknownFeature(String),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("model kind mismatch: {0}")]
    KindMismatch(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("execution time is zero")]
    ZeroDuration,
    #[error("column length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("stream carried no targets")]
    EmptyStream,
    #[error("build backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("unknown target {0}")]
    UnknownTarget(String),
    #[error("estimate failed: {0}")]
    Estimate(String),
    #[error("model file parse error at line {line}: {message}")]
    ModelFormat { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}
