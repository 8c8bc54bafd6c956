use thiserror::Error;

use crate::dataset::DataError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised by estimation, projection and simulation routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Data(#[from] DataError),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("{count} subsets of size {k} exceed the enumeration cap of {cap}; use sampling")]
    EnumerationCap { k: usize, count: String, cap: u64 },

    #[error("subset {subset:?} (k = {k}) has a rank-deficient design")]
    SingularSubset { k: usize, subset: Vec<usize> },

    #[error("all {attempted} subsets at k = {k} have rank-deficient designs")]
    AllSubsetsSingular { k: usize, attempted: usize },

    #[error("{0} is singular")]
    Singular(String),

    #[error("{what} is ill-conditioned (condition number {cond:.3e})")]
    IllConditioned { what: String, cond: f64 },

    #[error("no subset at k = {k} holds at least {needed} relevant instruments")]
    NoRelevantSubsets { k: usize, needed: usize },

    #[error("criterion evaluation failed at k = {k}: {source}")]
    Criterion {
        k: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{failed} of {total} replications failed (limit 5%)")]
    TooManyFailures { failed: usize, total: usize },
}

impl Error {
    /// True for failures of the numerical kind (singular or ill-conditioned
    /// systems) as opposed to bad inputs.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::SingularSubset { .. }
            | Error::AllSubsetsSingular { .. }
            | Error::Singular(_)
            | Error::IllConditioned { .. }
            | Error::NoRelevantSubsets { .. }
            | Error::TooManyFailures { .. } => true,
            Error::Criterion { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}
