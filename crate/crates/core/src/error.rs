use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid measure: {0}")]
    InvalidMeasure(String),

    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("domain error: {0}")]
    Domain(String),

    /// `U_t` or `V_t` lost positive definiteness.
    #[error("non-positive gain matrix at t = {t}: {which} has min eigenvalue {min_eig:e}")]
    NonPositiveGain {
        t: f64,
        which: &'static str,
        min_eig: f64,
    },

    #[error("numerical blow-up at t = {t}{}", path.map(|p| format!(" (path {p})")).unwrap_or_default())]
    NumericalBlowup { t: f64, path: Option<usize> },

    #[error("time {t} outside [{lo}, {hi}]")]
    TimeOutOfRange { t: f64, lo: f64, hi: f64 },

    #[error("time {0} is not a grid node")]
    NotOnGrid(f64),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Numerical failures map to a distinct CLI exit status.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonPositiveGain { .. } | Error::NumericalBlowup { .. }
        )
    }
}
