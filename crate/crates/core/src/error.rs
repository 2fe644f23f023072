use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid {field}: {reason}")]
    InvalidSpec { field: &'static str, reason: String },

    #[error("subordinator path too short: S({horizon}) = {reached} does not exceed level {level}")]
    InsufficientHorizon { horizon: f64, reached: f64, level: f64 },

    #[error("operation not supported for jump law {0}")]
    UnsupportedLaw(&'static str),

    #[error("non-finite value at step {step} (t = {t}, x = {x}, u = {u}) in {what}")]
    NonFinite { what: &'static str, step: usize, t: f64, x: f64, u: f64 },

    #[error("coefficient stream {name} unbounded: |value| = {value} exceeds bound {bound} at index {index}")]
    Unbounded { name: &'static str, index: usize, value: f64, bound: f64 },

    #[error("Picard iteration not contracting (norms {norms:?}); try beta >= {suggested_beta}")]
    NonContraction { norms: Vec<f64>, suggested_beta: f64 },

    #[error("precondition failed: {0}")]
    Precondition(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(field: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidSpec { field, reason: reason.into() }
}
