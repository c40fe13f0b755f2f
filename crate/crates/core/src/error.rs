use thiserror::Error;

/// Errors produced by the core crate.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("{name} = {value} is outside [{min}, {max}]")]
    Domain {
        name: &'static str,
        value: f64,
        min: f64,
        max: f64,
    },
    #[error("visibility is undefined for zero total counts")]
    UndefinedVisibility,
    #[error("invalid {name}: {reason}")]
    InvalidParameter {
        name: &'static str,
        reason: &'static str,
    },
    #[error("degenerate temperature calibration: anchor temperatures are equal")]
    DegenerateCalibration,
    #[error("stream {stream} is not sorted at index {index}")]
    UnsortedStream { stream: &'static str, index: usize },
    #[error("correlation histogram has no peak")]
    NoPeak,
    #[error("accidental offset {offset_ps} ps is smaller than 10 x window ({window_ps} ps)")]
    OffsetTooSmall { offset_ps: i64, window_ps: u64 },
    #[error("empty pair set")]
    EmptyPairSet,
    #[error("unknown pair id {0}")]
    UnknownPair(usize),
    #[error("calibration target is infeasible: {0}")]
    InfeasibleTarget(&'static str),
    #[error("key rate is not positive at the reference length")]
    NoPositiveDistance,
    #[error("key rate is not monotone on [{lo_km}, {hi_km}] km")]
    NotMonotone { lo_km: f64, hi_km: f64 },
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn check_range(name: &'static str, value: f64, min: f64, max: f64) -> Result<f64> {
    // NaN fails both comparisons and is rejected here too
    if value >= min && value <= max {
        Ok(value)
    } else {
        Err(Error::Domain {
            name,
            value,
            min,
            max,
        })
    }
}

pub(crate) fn invalid(name: &'static str, reason: &'static str) -> Error {
    Error::InvalidParameter { name, reason }
}
