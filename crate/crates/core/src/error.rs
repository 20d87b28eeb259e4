use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// An input is non-finite or outside the domain of the function.
    #[error("domain error: {0}")]
    Domain(String),
    /// A parameter set or configuration violates an invariant.
    #[error("invalid parameter: {0}")]
    Invalid(String),
    /// A caller broke an operation's precondition (unsorted times, missing baseline, ...).
    #[error("contract violation: {0}")]
    Contract(String),
    /// Quadrature or optimizer failed to reach the requested accuracy.
    #[error("numerical error: {what} (achieved tolerance {achieved:.3e})")]
    Numerical { what: String, achieved: f64 },
}

impl Error {
    pub(crate) fn numerical(what: impl Into<String>, achieved: f64) -> Self {
        Error::Numerical {
            what: what.into(),
            achieved,
        }
    }
}

pub(crate) fn ensure_finite(name: &str, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("{name} must be finite, got {value}")))
    }
}
