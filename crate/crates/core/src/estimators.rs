//! OLS, 2SLS, the nested-selection 2SLS baseline, and CSA-2SLS.
//!
//! Every estimator has the form `β̂ = (X̂'X)^{-1} X̂'y` with `X̂ = P X` for some
//! symmetric `P` (`P = I` for OLS). Coefficients are ordered endogenous first,
//! then exogenous.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::criterion::{
    default_lambda, preliminary_with_basis, select_k_with_basis, CriterionCurve, FeasibleCriterion,
    KSelection, PreliminaryFit, SamplingConfig,
};
use crate::dataset::DataSet;
use crate::error::{Error, Result};
use crate::inference::{robust_vcov, sandwich, standard_errors, ClusterPartition};
use crate::linalg::{checked_inverse, symmetrize, MAX_CONDITION};
use crate::projection::{CsaProjection, InstrumentBasis, SingularPolicy};
use crate::subsets::SubsetIndex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Ols,
    Tsls,
    Dn,
    Csa,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::Ols => "OLS",
            Method::Tsls => "2SLS",
            Method::Dn => "DN",
            Method::Csa => "CSA",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ols" => Ok(Method::Ols),
            "tsls" | "2sls" => Ok(Method::Tsls),
            "dn" => Ok(Method::Dn),
            "csa" => Ok(Method::Csa),
            other => Err(Error::InvalidParameter(format!("unknown method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EstimationResult {
    pub method: Method,
    /// Endogenous coefficients, then exogenous.
    pub beta_hat: DVector<f64>,
    /// Regressor names in coefficient order.
    pub names: Vec<String>,
    /// Selected subset size (CSA) or number of leading instruments (DN).
    pub k_hat: Option<usize>,
    pub criterion_curve: Option<CriterionCurve>,
    /// Estimated covariance of `beta_hat` (`Σ̂ / N`).
    pub vcov: Option<DMatrix<f64>>,
    pub se: Option<DVector<f64>>,
    /// Subsets averaged into the projection (CSA).
    pub subsets_used: Option<usize>,
}

impl EstimationResult {
    fn new(method: Method, beta_hat: DVector<f64>, ds: &DataSet) -> Self {
        EstimationResult {
            method,
            beta_hat,
            names: ds.names().regressors(),
            k_hat: None,
            criterion_curve: None,
            vcov: None,
            se: None,
            subsets_used: None,
        }
    }

    fn with_sigma(mut self, sigma: DMatrix<f64>, n: usize) -> Self {
        self.se = Some(standard_errors(&sigma, n));
        self.vcov = Some(sigma / n as f64);
        self
    }
}

// `(A)^{-1} b` for the symmetric second-stage system, refusing ill-conditioned A.
fn second_stage(a: &DMatrix<f64>, b: &DVector<f64>, what: &str) -> Result<DVector<f64>> {
    let mut a = a.clone();
    symmetrize(&mut a);
    let inv = checked_inverse(&a, what, MAX_CONDITION)?;
    let beta = inv * b;
    if beta.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular(what.to_string()));
    }
    Ok(beta)
}

/// `(X'X)^{-1} X'y` with a robust covariance.
pub fn ols(ds: &DataSet) -> Result<EstimationResult> {
    let x = ds.regressors();
    let beta = second_stage(&x.tr_mul(x), &x.tr_mul(ds.y()), "X'X")?;
    let resid = ds.y() - x * &beta;
    let sigma = sandwich(x, x, &resid, &ClusterPartition::for_dataset(ds))?;
    Ok(EstimationResult::new(Method::Ols, beta, ds).with_sigma(sigma, ds.n()))
}

/// 2SLS on `[Z_S, X_exog]`, with all instruments when `subset` is `None`.
pub fn tsls(ds: &DataSet, subset: Option<&SubsetIndex>) -> Result<EstimationResult> {
    let basis = Arc::new(InstrumentBasis::new(ds)?);
    tsls_with_basis(ds, &basis, subset)
}

pub(crate) fn tsls_with_basis(
    ds: &DataSet,
    basis: &Arc<InstrumentBasis>,
    subset: Option<&SubsetIndex>,
) -> Result<EstimationResult> {
    let kk = ds.instrument_count();
    let full = SubsetIndex::full(kk);
    let s = subset.unwrap_or(&full);
    if s.members().iter().any(|&j| j >= kk) {
        return Err(Error::InvalidParameter(format!(
            "instrument subset refers past column {kk}"
        )));
    }
    if s.len() < ds.d1() {
        return Err(Error::InvalidParameter(format!(
            "{} instruments cannot identify {} endogenous regressors",
            s.len(),
            ds.d1()
        )));
    }
    let proj = CsaProjection::from_subsets(
        basis,
        s.len(),
        std::slice::from_ref(s),
        SingularPolicy::Strict,
    )
    .map_err(|_| Error::Singular("first-stage design".into()))?;
    let mut r = fit_projection(ds, &proj, Method::Tsls)?;
    r.subsets_used = None;
    Ok(r)
}

// β̂ and robust covariance for a given projection.
fn fit_projection(ds: &DataSet, proj: &CsaProjection, method: Method) -> Result<EstimationResult> {
    let what = format!("X'PX at k = {}", proj.k());
    let beta = second_stage(&proj.xpx(), &proj.xpy(), &what)?;
    let sigma = robust_vcov(ds, proj, &beta, &ClusterPartition::for_dataset(ds))?;
    let mut r = EstimationResult::new(method, beta, ds).with_sigma(sigma, ds.n());
    r.subsets_used = Some(proj.count_used());
    Ok(r)
}

/// Nested-selection 2SLS: the feasible criterion evaluated on the single
/// projections onto the first `j` instruments, `j = d1..=K`, and 2SLS on the
/// smallest minimizer.
pub fn dn_baseline(
    ds: &DataSet,
    pre: &PreliminaryFit,
    lambda: &DVector<f64>,
) -> Result<EstimationResult> {
    let basis = Arc::new(InstrumentBasis::new(ds)?);
    dn_with_basis(ds, &basis, pre, lambda)
}

pub(crate) fn dn_with_basis(
    ds: &DataSet,
    basis: &Arc<InstrumentBasis>,
    pre: &PreliminaryFit,
    lambda: &DVector<f64>,
) -> Result<EstimationResult> {
    let crit = FeasibleCriterion::new(ds, pre, lambda)?;
    let mut grid = Vec::new();
    let mut values = Vec::new();
    let mut projections = Vec::new();
    for j in ds.d1()..=ds.instrument_count() {
        let s = SubsetIndex::full(j);
        let proj = CsaProjection::from_subsets(
            basis,
            j,
            std::slice::from_ref(&s),
            SingularPolicy::Strict,
        )?;
        grid.push(j);
        values.push(crit.value(&proj));
        projections.push(proj);
    }
    let curve = CriterionCurve::from_values(grid, values)?;
    let chosen = &projections[curve.k_hat - ds.d1()];
    let mut r = fit_projection(ds, chosen, Method::Dn)?;
    r.subsets_used = None;
    r.k_hat = Some(curve.k_hat);
    r.criterion_curve = Some(curve);
    Ok(r)
}

/// Settings for [`csa_2sls`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CsaConfig {
    /// Contrast for the selection criterion; `e_1` when `None`.
    pub lambda: Option<DVector<f64>>,
    pub sampling: SamplingConfig,
    /// Estimate at this `k` and skip selection.
    pub fixed_k: Option<usize>,
    /// Leading instruments for the preliminary fit; Mallows-selected when `None`.
    pub preliminary_k: Option<usize>,
}

impl CsaConfig {
    pub fn lambda_for(&self, d: usize) -> DVector<f64> {
        self.lambda.clone().unwrap_or_else(|| default_lambda(d))
    }
}

/// CSA-2SLS `(X'P^k X)^{-1} X'P^k y`, at `config.fixed_k` or at the `k̂`
/// minimizing the feasible criterion.
pub fn csa_2sls(ds: &DataSet, config: &CsaConfig) -> Result<EstimationResult> {
    let basis = Arc::new(InstrumentBasis::new(ds)?);
    Ok(csa_with_basis(ds, &basis, None, config)?.0)
}

/// CSA-2SLS that reuses a basis and optionally a preliminary fit, returning
/// the evaluated projections when `k` was selected.
pub fn csa_with_basis(
    ds: &DataSet,
    basis: &Arc<InstrumentBasis>,
    pre: Option<&PreliminaryFit>,
    config: &CsaConfig,
) -> Result<(EstimationResult, Option<KSelection>)> {
    let kk = ds.instrument_count();
    if let Some(k) = config.fixed_k {
        if k < ds.d1() || k > kk {
            return Err(Error::InvalidParameter(format!(
                "fixed k = {k} outside [{}, {kk}]",
                ds.d1()
            )));
        }
        let plan = config.sampling.plan(kk, k)?;
        let proj = CsaProjection::build(basis, &plan, config.sampling.projection)?;
        let mut r = fit_projection(ds, &proj, Method::Csa)?;
        r.k_hat = Some(k);
        return Ok((r, None));
    }
    let owned;
    let pre = match pre {
        Some(p) => p,
        None => {
            owned = preliminary_with_basis(ds, basis, config.preliminary_k)?;
            &owned
        }
    };
    let lambda = config.lambda_for(ds.d());
    let sel = select_k_with_basis(ds, basis, pre, &lambda, &config.sampling)?;
    let mut r = fit_projection(ds, sel.selected(), Method::Csa)?;
    r.k_hat = Some(sel.curve.k_hat);
    r.criterion_curve = Some(sel.curve.clone());
    Ok((r, Some(sel)))
}

/// Runs several methods on one data set, sharing the instrument basis and
/// the preliminary fit.
pub fn estimate_all(
    ds: &DataSet,
    methods: &[Method],
    config: &CsaConfig,
) -> Result<Vec<EstimationResult>> {
    let basis = Arc::new(InstrumentBasis::new(ds)?);
    let needs_pre = methods
        .iter()
        .any(|m| *m == Method::Dn || (*m == Method::Csa && config.fixed_k.is_none()));
    let pre = if needs_pre {
        Some(preliminary_with_basis(ds, &basis, config.preliminary_k)?)
    } else {
        None
    };
    let lambda = config.lambda_for(ds.d());
    methods
        .iter()
        .map(|m| match m {
            Method::Ols => ols(ds),
            Method::Tsls => tsls_with_basis(ds, &basis, None),
            Method::Dn => dn_with_basis(ds, &basis, pre.as_ref().expect("fit"), &lambda),
            Method::Csa => Ok(csa_with_basis(ds, &basis, pre.as_ref(), config)?.0),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::criterion::preliminary_fit;
    use crate::projection::{csa_projection, projection_matrix, subset_design};
    use crate::subsets::{enumerate_subsets, SubsetPlan};
    use crate::testutil::{random_dataset, random_matrix};

    fn exact(k: Option<usize>) -> CsaConfig {
        CsaConfig {
            sampling: SamplingConfig {
                draws: None,
                ..Default::default()
            },
            fixed_k: k,
            ..Default::default()
        }
    }

    #[test]
    fn ols_recovers_noiseless_coefficients() {
        let base = random_dataset(20, 1, 2, 3, 1);
        let beta = DVector::from_vec(vec![1.5, -0.25, 3.0]);
        let y = base.regressors() * &beta;
        let ds = DataSet::new(
            y,
            base.endogenous().clone(),
            base.exogenous().clone(),
            base.instruments().clone(),
        )
        .unwrap();
        let r = ols(&ds).unwrap();
        assert!((r.beta_hat - beta).amax() < 1e-12);
        assert!(r.k_hat.is_none());
        assert!(r.se.unwrap().amax() < 1e-10);
    }

    #[test]
    fn ols_matches_normal_equations() {
        let base = random_dataset(12, 1, 2, 1, 4);
        let x = base.regressors();
        let oracle = (x.transpose() * x).try_inverse().unwrap() * x.transpose() * base.y();
        let r = ols(&base).unwrap();
        assert!((r.beta_hat - oracle).amax() < 1e-12);
    }

    #[test]
    fn just_identified_is_iv_formula() {
        let ds = random_dataset(25, 1, 0, 1, 8);
        let z = ds.instruments();
        let x = ds.regressors();
        let iv = (z.transpose() * x)[(0, 0)].recip() * (z.transpose() * ds.y())[0];
        let r = tsls(&ds, None).unwrap();
        assert!((r.beta_hat[0] - iv).abs() < 1e-12 * iv.abs().max(1.0));
    }

    #[test]
    fn tsls_matches_dense_formula() {
        let ds = random_dataset(30, 1, 1, 4, 12);
        let s = SubsetIndex::new(vec![1, 3], 4).unwrap();
        let p = projection_matrix(&subset_design(&ds, &s)).unwrap();
        let x = ds.regressors();
        let oracle = (x.transpose() * &p * x).try_inverse().unwrap() * x.transpose() * &p * ds.y();
        let r = tsls(&ds, Some(&s)).unwrap();
        assert!((r.beta_hat - oracle).amax() < 1e-10);
    }

    #[test]
    fn tsls_rejects_underidentification() {
        let ds = random_dataset(30, 2, 1, 4, 12);
        let s = SubsetIndex::new(vec![1], 4).unwrap();
        assert!(tsls(&ds, Some(&s)).is_err());
    }

    #[test]
    fn csa_at_full_k_is_tsls() {
        for seed in 0..10 {
            let ds = random_dataset(40, 1, 1, 5, seed);
            let a = csa_2sls(&ds, &exact(Some(5))).unwrap();
            let b = tsls(&ds, None).unwrap();
            assert!((a.beta_hat - b.beta_hat).amax() < 1e-10);
        }
    }

    #[test]
    fn orthogonal_instruments_give_same_estimate_for_every_k() {
        let raw = random_matrix(30, 4, 3);
        let q = raw.qr().q();
        let base = random_dataset(30, 1, 0, 4, 5);
        let x = DMatrix::from_fn(30, 1, |i, _| q.row(i).sum() + base.endogenous()[(i, 0)]);
        let ds = DataSet::new(base.y().clone(), x, DMatrix::zeros(30, 0), q).unwrap();
        let full = tsls(&ds, None).unwrap().beta_hat;
        for k in 1..=4 {
            let r = csa_2sls(&ds, &exact(Some(k))).unwrap();
            assert!((r.beta_hat - &full).amax() < 1e-10, "k = {k}");
        }
    }

    #[test]
    fn csa_minimizes_average_gmm_criterion() {
        // β̂ minimizes (1/M) Σ_m (y - Xb)' P_m (y - Xb); solve the quadratic directly.
        let ds = random_dataset(40, 1, 1, 5, 21);
        let x = ds.regressors();
        let y = ds.y();
        let subsets = enumerate_subsets(5, 2, 100).unwrap();
        let mut a = DMatrix::zeros(2, 2);
        let mut b = DVector::zeros(2);
        for s in &subsets {
            let z = subset_design(&ds, s);
            let w = (z.transpose() * &z).try_inverse().unwrap();
            let zx = z.transpose() * x;
            let zy = z.transpose() * y;
            a += zx.transpose() * &w * &zx;
            b += zx.transpose() * &w * &zy;
        }
        let oracle = a.lu().solve(&b).unwrap();
        let r = csa_2sls(&ds, &exact(Some(2))).unwrap();
        assert!((r.beta_hat - oracle).amax() < 1e-8);
    }

    #[test]
    fn estimates_scale_with_outcome() {
        let ds = random_dataset(50, 1, 1, 6, 2);
        let cfg = CsaConfig::default();
        let a = csa_2sls(&ds, &cfg).unwrap();
        let b = csa_2sls(&ds.scale_outcome(3.0), &cfg).unwrap();
        assert_eq!(a.k_hat, b.k_hat);
        assert!((a.beta_hat * 3.0 - b.beta_hat).amax() < 1e-12);
    }

    #[test]
    fn exact_csa_ignores_instrument_order() {
        let ds = random_dataset(50, 1, 1, 6, 6);
        let perm = [3, 0, 5, 1, 4, 2];
        let a = csa_2sls(&ds, &exact(None)).unwrap();
        let b = csa_2sls(&ds.permute_instruments(&perm), &exact(None)).unwrap();
        assert_eq!(a.k_hat, b.k_hat);
        assert!((a.beta_hat - b.beta_hat).amax() < 1e-10);
    }

    #[test]
    fn selection_result_is_attached() {
        let ds = random_dataset(60, 1, 1, 8, 13);
        let r = csa_2sls(&ds, &CsaConfig::default()).unwrap();
        let curve = r.criterion_curve.as_ref().unwrap();
        assert_eq!(r.k_hat, Some(curve.k_hat));
        assert_eq!(curve.k_grid.len(), 8);
        let se = r.se.unwrap();
        assert!(se.iter().all(|&s| s > 0.0));
    }

    #[test]
    fn fixed_k_is_validated() {
        let ds = random_dataset(40, 1, 1, 5, 1);
        assert!(csa_2sls(&ds, &exact(Some(0))).is_err());
        assert!(csa_2sls(&ds, &exact(Some(6))).is_err());
    }

    #[test]
    fn dn_with_single_instrument_is_just_identified_tsls() {
        let ds = random_dataset(30, 1, 1, 1, 7);
        let pre = preliminary_fit(&ds, None).unwrap();
        let dn = dn_baseline(&ds, &pre, &default_lambda(2)).unwrap();
        let iv = tsls(&ds, None).unwrap();
        assert_eq!(dn.k_hat, Some(1));
        assert!((dn.beta_hat - iv.beta_hat).amax() < 1e-12);
    }

    #[test]
    fn dn_criterion_uses_idempotent_moments() {
        // for nested P_j the criterion needs only X'(I-P_j)X
        let ds = random_dataset(40, 1, 1, 5, 17);
        let pre = preliminary_fit(&ds, None).unwrap();
        let lambda = default_lambda(2);
        let dn = dn_baseline(&ds, &pre, &lambda).unwrap();
        let curve = dn.criterion_curve.unwrap();
        let n = 40.0;
        let x = ds.regressors();
        let h_inv = pre.h_tilde.clone().try_inverse().unwrap();
        let a = &h_inv * &lambda;
        for (&j, &v) in curve.k_grid.iter().zip(&curve.values) {
            let p = projection_matrix(&subset_design(&ds, &SubsetIndex::full(j))).unwrap();
            let m = x.transpose() * (DMatrix::identity(40, 40) - p) * x / n;
            let jf = j as f64;
            // tr(P_j^2) = j + d2 with the exogenous column included
            let e = &m + &pre.sigma_u * ((jf - 1.0) / n);
            let xi = &m + &pre.sigma_u * (jf / n) - &pre.sigma_u;
            let xa = &xi * &a;
            let oracle = a.dot(&pre.sigma_ueps).powi(2) * jf * jf / n
                + pre.sigma2_eps * (a.dot(&(&e * &a)) - xa.dot(&(&h_inv * &xa)));
            assert!(
                (v - oracle).abs() < 1e-12 * oracle.abs().max(1.0),
                "j = {j}"
            );
        }
    }

    #[test]
    fn estimate_all_matches_individual_calls() {
        let ds = random_dataset(60, 1, 1, 6, 30);
        let cfg = CsaConfig::default();
        let all = estimate_all(
            &ds,
            &[Method::Ols, Method::Tsls, Method::Dn, Method::Csa],
            &cfg,
        )
        .unwrap();
        let pre = preliminary_fit(&ds, None).unwrap();
        assert_eq!(all[0].beta_hat, ols(&ds).unwrap().beta_hat);
        assert!((&all[1].beta_hat - tsls(&ds, None).unwrap().beta_hat).amax() < 1e-12);
        assert!(
            (&all[2].beta_hat - dn_baseline(&ds, &pre, &default_lambda(2)).unwrap().beta_hat)
                .amax()
                < 1e-12
        );
        assert!((&all[3].beta_hat - csa_2sls(&ds, &cfg).unwrap().beta_hat).amax() < 1e-12);
        assert_eq!(all[3].method, Method::Csa);
    }

    #[test]
    fn method_names_round_trip() {
        for m in [Method::Ols, Method::Tsls, Method::Dn, Method::Csa] {
            assert_eq!(m.label().parse::<Method>().unwrap(), m);
        }
        assert!("liml".parse::<Method>().is_err());
    }

    #[test]
    fn csa_projection_helper_agrees() {
        let ds = random_dataset(30, 1, 1, 4, 40);
        let proj = csa_projection(&ds, &SubsetPlan::exact(4, 2).unwrap()).unwrap();
        let r = csa_2sls(&ds, &exact(Some(2))).unwrap();
        let beta = proj.xpx().try_inverse().unwrap() * proj.xpy();
        assert!((r.beta_hat - beta).amax() < 1e-10);
        assert_eq!(r.subsets_used, Some(6));
    }
}
