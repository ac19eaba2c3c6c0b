use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KstError {
    #[error("mode mismatch: {0}")]
    ModeMismatch(String),

    #[error("mode unsupported: {0}")]
    ModeUnsupported(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("out of domain: {0}")]
    OutOfDomain(String),

    #[error("{what} = {value} exceeds the configured cap {cap}")]
    CapExceeded {
        what: String,
        value: String,
        cap: String,
    },

    #[error("{0} is not a memory index (base-3 digit 1 present or out of range)")]
    NotInLambda(String),

    #[error("out of range: {0}")]
    OutOfRange(String),

    #[error("winding search exhausted after {budget} samples (best max deviation {best:.3e})")]
    SearchExhausted { budget: u64, best: f64 },

    #[error("incompatible variant: {0}")]
    IncompatibleVariant(String),

    #[error("target oracle failed: {0}")]
    Oracle(String),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, KstError>;
