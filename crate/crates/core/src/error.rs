use thiserror::Error;

/// Errors raised across the toolkit.
///
/// Variant names follow the failure kind rather than the module that
/// raised it, so callers can match on e.g. [`Error::Shape`] regardless of
/// whether it came from epoching, a convolution or a PFI window.
#[derive(Debug, Error)]
pub enum Error {
    #[error("RangeError: {0}")]
    Range(String),
    #[error("ShapeError: {0}")]
    Shape(String),
    #[error("DegenerateChannelError: channel {channel} has zero variance")]
    DegenerateChannel { channel: usize },
    #[error("StratifyError: {0}")]
    Stratify(String),
    #[error("FormatError: {0}")]
    Format(String),
    #[error("FrequencyError: {0}")]
    Frequency(String),
    #[error("DomainError: {0}")]
    Domain(String),
    #[error("TokenError: token {token} is not below the bin count {bins}")]
    Token { token: usize, bins: usize },
    #[error("DivergenceError: generated value {value} at step {step} exceeds the divergence guard")]
    Divergence { step: usize, value: f64 },
    #[error("StateError: {0}")]
    State(String),
    #[error("NumericsError: {0}")]
    Numerics(String),
    #[error("ClassCountError: class {class} has no samples")]
    ClassCount { class: usize },
    #[error("NormalizationError: {0}")]
    Normalization(String),
    #[error("SingularError: {0}")]
    Singular(String),
    #[error("ConditionError: condition {index} is not below the condition count {count}")]
    Condition { index: usize, count: usize },
    #[error("ConfigError: {0}")]
    Config(String),
    #[error("IndexError: {0}")]
    Index(String),
    #[error("InterfaceError: {0}")]
    Interface(String),
    #[error("IoError: {0}")]
    Io(#[from] std::io::Error),
    #[error("JsonError: {0}")]
    Json(#[from] serde_json::Error),
    #[error("CsvError: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
