use std::ops::RangeInclusive;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("index {index} out of range 1..={len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("stream lengths differ ({left} vs {right})")]
    LengthMismatch { left: usize, right: usize },

    #[error("value {value} outside [0, {bound}]")]
    ValueOutOfRange { value: f64, bound: f64 },

    #[error("invalid parameter `{name}` = {value}: {reason}")]
    InvalidParameter {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },

    #[error("infeasible parameters: {0}")]
    Infeasible(String),

    #[error("ledger range {new:?} overlaps existing range {existing:?}")]
    RangeOverlap {
        new: RangeInclusive<usize>,
        existing: RangeInclusive<usize>,
    },

    #[error("charge on {range:?} would exceed budget (eps {epsilon} > {cap_epsilon} or delta {delta} > {cap_delta})")]
    BudgetExceeded {
        range: RangeInclusive<usize>,
        epsilon: f64,
        delta: f64,
        cap_epsilon: f64,
        cap_delta: f64,
    },

    #[error("segment of length {0} is already full")]
    SegmentFull(usize),

    #[error("prefix index {index} is no longer retained (current index {current})")]
    NotRetained { index: usize, current: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },

    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
}

impl Error {
    pub fn io(path: &std::path::Path, err: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            message: err.to_string(),
        }
    }
}

impl Error {
    pub(crate) fn param(name: &'static str, value: f64, reason: &'static str) -> Self {
        Error::InvalidParameter { name, value, reason }
    }
}

/// Rejects non-finite values and anything outside the open unit interval.
pub(crate) fn check_unit_open(name: &'static str, value: f64) -> Result<()> {
    if value > 0.0 && value < 1.0 {
        Ok(())
    } else {
        Err(Error::param(name, value, "must lie in (0, 1)"))
    }
}

pub(crate) fn check_positive(name: &'static str, value: f64) -> Result<()> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(Error::param(name, value, "must be positive and finite"))
    }
}
