use thiserror::Error;

/// Errors raised anywhere in the numeric stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("backward requested on a tape whose forward values are stale")]
    BackwardBeforeForward,
    #[error("time {t} outside [{lo}, {hi}]")]
    TimeOutOfRange { t: f64, lo: f64, hi: f64 },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("singular matrix: {0}")]
    Singular(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_time(t: f64, lo: f64, hi: f64) -> Result<()> {
    if t.is_finite() && t >= lo && t <= hi {
        Ok(())
    } else {
        Err(Error::TimeOutOfRange { t, lo, hi })
    }
}
