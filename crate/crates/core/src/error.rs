use thiserror::Error;

/// Errors raised across the library. The `Display` strings of the
/// validation variants are stable identifiers that callers match on.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("empty-sample")]
    EmptySample,

    #[error("invalid-sample: {0}")]
    InvalidSample(String),

    #[error("beta-out-of-range: {0}")]
    BetaOutOfRange(f64),

    #[error("gamma-out-of-range: {0}")]
    GammaOutOfRange(f64),

    #[error("eta-out-of-range: {0}")]
    EtaOutOfRange(f64),

    #[error("invalid-parameter: {0}")]
    InvalidParameter(String),

    #[error("oce-unbounded: {0}")]
    OceUnbounded(String),

    #[error("dimension-mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("not-positive-definite: jitter up to {0:e} failed")]
    NotPositiveDefinite(f64),

    #[error("objective-nonfinite at iterate {iterate:?}")]
    ObjectiveNonFinite { iterate: Vec<f64> },

    #[error("risk-not-ex-ante-solvable: {0}")]
    RiskNotExAnteSolvable(String),

    #[error("auxiliary-required")]
    AuxiliaryRequired,

    #[error("index-out-of-range: {index} (len {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("empty-grid")]
    EmptyGrid,

    #[error("io: {0}")]
    Io(String),

    #[error("format: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Format(e.to_string())
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
