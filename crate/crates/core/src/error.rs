use diffcore::DiffError;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] DiffError),

    #[error("{arch} is fixed to {expected_n}x{expected_m} profiles, got {n}x{m}")]
    FixedShape {
        arch: &'static str,
        expected_n: usize,
        expected_m: usize,
        n: usize,
        m: usize,
    },

    #[error("invalid setting: {0}")]
    InvalidSetting(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("regret oracle grid of {points} points exceeds the limit of {limit}")]
    GridTooLarge { points: u128, limit: u128 },

    #[error("bundle value {value} outside the tabulated range [0, {max}]")]
    TableCoverage { value: f64, max: f64 },

    #[error("numeric failure at iteration {iteration}: {reason}")]
    Numeric { iteration: usize, reason: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
