use thiserror::Error;

/// Errors raised by the core library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),
    #[error("invalid mask index: {0}")]
    InvalidMask(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid simplex vector: {0}")]
    InvalidSimplex(String),
    #[error("invalid ratio: {0}")]
    InvalidRatio(f64),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("rank error: {0}")]
    Rank(String),
    #[error("input kind error: {0}")]
    InputKind(String),
    #[error("unreachable state: {0}")]
    UnreachableState(String),
    #[error("schedule order error: s={s} must not exceed t={t}")]
    ScheduleOrder { s: f64, t: f64 },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("instance too large: {states} states exceed the cap of {cap}")]
    InstanceTooLarge { states: u128, cap: usize },
    #[error("KL divergence is infinite: p puts mass outside the support of q")]
    InfiniteKl,
}

pub type Result<T> = std::result::Result<T, Error>;
