use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// A parameter violates one of its hard invariants.
    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParameter { field: &'static str, reason: String },

    /// The inputs lie outside the domain where the closed forms are defined.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("measurement does not observe the oscillator: {0}")]
    NotDetectable(String),

    #[error("no convergence after {iterations} iterations: {what}")]
    NoConvergence { what: String, iterations: usize },

    #[error("length mismatch: {0}")]
    Length(String),

    #[error("frequency grid mismatch: {0}")]
    GridMismatch(String),

    #[error("band error: {0}")]
    Band(String),

    #[error("no zero crossings found in the input")]
    NoCrossings,

    #[error("empty input")]
    Empty,

    #[error("degenerate binning: {0}")]
    DegenerateBinning(String),

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn invalid(field: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            field,
            reason: reason.into(),
        }
    }

    /// True for errors caused by bad configuration rather than numerics.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::InvalidParameter { .. } | Error::Parse(_))
    }
}
