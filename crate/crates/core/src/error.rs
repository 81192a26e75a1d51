use std::path::PathBuf;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty input")]
    EmptyInput,
    #[error("invalid framing: {0}")]
    InvalidFraming(String),
    #[error("non-invertible framing: {0}")]
    NonInvertibleFraming(String),
    #[error("zero-energy source")]
    ZeroEnergySource,
    #[error("sample rate mismatch: {0} Hz vs {1} Hz")]
    SampleRateMismatch(u32, u32),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("zero vector")]
    ZeroVector,
    #[error("empty model list")]
    EmptyModels,
    #[error("unknown speaker label {0}")]
    UnknownLabel(usize),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("missing dependency: {0}")]
    MissingDependency(String),
    #[error("{0} exists (use --force to overwrite)")]
    Exists(PathBuf),
    #[error("model container: {0}")]
    Container(String),
    #[error("config: {0}")]
    Config(String),
    #[error("wav: {0}")]
    Wav(#[from] hound::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
