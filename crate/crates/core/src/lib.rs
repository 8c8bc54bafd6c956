//! Complete subset averaging two-stage least squares.
//!
//! The first-stage projection is the equal-weight average of the projections
//! onto every size-`k` subset of the excluded instruments (or a random sample
//! of them), and `k` is chosen by minimizing a feasible approximation to the
//! mean squared error of a linear combination of the coefficients.
//!
//! ```no_run
//! use csa2sls::dataset::ColumnRole::*;
//! use csa2sls::{csa_2sls, load_csv, CsaConfig, DatasetSchema};
//!
//! let schema = DatasetSchema::from_roles([
//!     ("share", Outcome),
//!     ("price", Endogenous),
//!     ("z1", Instrument),
//!     ("z2", Instrument),
//! ])?;
//! let data = load_csv("market.csv", &schema)?;
//! let fit = csa_2sls(&data, &CsaConfig::default())?;
//! println!("{} (k = {:?})", fit.beta_hat, fit.k_hat);
//! # Ok::<(), Box<dyn std::error::Error>>(())
//! ```

pub mod criterion;
pub mod dataset;
pub mod error;
pub mod estimators;
pub mod inference;
pub mod linalg;
pub mod projection;
pub mod simulation;
pub mod subsets;

#[cfg(test)]
mod testutil;

pub use criterion::{
    feasible_mse, mallows_first_stage, oracle_mse, oracle_mse_irrelevant, preliminary_fit,
    select_k, CriterionCurve, OracleInputs, PreliminaryFit, SamplingConfig,
};
pub use dataset::{
    load_csv, read_csv, write_csv, ClusterLabels, DataError, DataSet, DatasetSchema,
};
pub use error::{Error, Result};
pub use estimators::{
    csa_2sls, dn_baseline, estimate_all, ols, tsls, CsaConfig, EstimationResult, Method,
};
pub use inference::{confidence_interval, robust_vcov, ClusterPartition, Interval};
pub use projection::{
    csa_projection, CsaProjection, InstrumentBasis, ProjectionOptions, SingularPolicy,
};
pub use simulation::{
    generate, run_design, solve_pi, DgpConfig, SignalShape, SimulationReport, SimulationSettings,
};
pub use subsets::{SubsetIndex, SubsetPlan};
