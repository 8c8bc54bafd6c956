//! Subset-size selection.
//!
//! A preliminary 2SLS fit (instruments picked by a nested first-stage Mallows
//! scan) supplies residual moments that are held fixed across `k`. The
//! feasible approximate MSE
//!
//! ```text
//! S(k) = s_le^2 k^2 / N + s_e^2 [ a' e(k) a - a' xi(k) H^-1 xi(k) a ],   a = H^-1 lambda
//! e(k)  = X'(I-P)^2 X / N + Su (2k - tr(P^2)) / N
//! xi(k) = X'(I-P) X / N + Su k / N - Su
//! ```
//!
//! is evaluated on every `k` in `d1..=K` and its smallest minimizer is `k_hat`.
//! The infeasible oracle versions, which use the true reduced form `f`, are
//! provided for simulation studies.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::dataset::DataSet;
use crate::error::{Error, Result};
use crate::linalg::{self, checked_inverse, dot, quad, MAX_CONDITION};
use crate::projection::{
    build_projections, CsaProjection, InstrumentBasis, ProjectionOptions, SingularPolicy,
};
use crate::subsets::{derive_seed, SubsetIndex, SubsetPlan, DEFAULT_DRAWS};

/// Largest condition number accepted for the preliminary `H`.
pub const MAX_H_CONDITION: f64 = 1e12;

/// Result of the nested first-stage Mallows scan.
#[derive(Debug, Clone)]
pub struct MallowsSelection {
    /// Selected number of leading instruments.
    pub k_tilde: usize,
    /// `(j, Cp(j))` for `j = d1..=K`.
    pub cp: Vec<(usize, f64)>,
    /// `P_{k_tilde} X`.
    pub f_tilde: DMatrix<f64>,
}

/// Mallows scan over nested leading instrument sets `{1..j}` (plus the
/// exogenous regressors):
/// `Cp(j) = tr[(X - P_j X)'(X - P_j X)] / N + 2 s2 (j + d2) / N`,
/// with `s2` the trace residual variance of the largest model divided by `N d`.
pub fn mallows_first_stage(ds: &DataSet) -> Result<MallowsSelection> {
    let basis = Arc::new(InstrumentBasis::new(ds)?);
    mallows_with_basis(ds, &basis)
}

pub(crate) fn mallows_with_basis(
    ds: &DataSet,
    basis: &Arc<InstrumentBasis>,
) -> Result<MallowsSelection> {
    let n = ds.n();
    let kk = ds.instrument_count();
    let (d1, d2, d) = (ds.d1(), ds.d2(), ds.d());
    if n <= kk + d2 {
        return Err(Error::InvalidParameter(format!(
            "Mallows scan needs N > K + d2 ({n} <= {})",
            kk + d2
        )));
    }
    // residual sums of squares of X on nested designs, via the fitted sums
    let total_ss = ds.regressors().norm_squared();
    let nested: Vec<SubsetIndex> = (1..=kk).map(SubsetIndex::full).collect();
    let mut rss = Vec::with_capacity(kk);
    for s in &nested {
        let p = CsaProjection::from_subsets(
            basis,
            s.len(),
            std::slice::from_ref(s),
            SingularPolicy::Strict,
        )
        .map_err(|_| Error::Singular(format!("first-stage design with {} instruments", s.len())))?;
        rss.push(total_ss - p.xpx().trace());
    }
    let s2 = rss[kk - 1] / (n as f64 * d as f64);
    let cp: Vec<(usize, f64)> = (d1..=kk)
        .map(|j| {
            let v = rss[j - 1] / n as f64 + 2.0 * s2 * (j + d2) as f64 / n as f64;
            (j, v)
        })
        .collect();
    let k_tilde = argmin_smallest(cp.iter().map(|&(j, v)| (j, v))).0;
    let s = SubsetIndex::full(k_tilde);
    let p = CsaProjection::from_subsets(
        basis,
        k_tilde,
        std::slice::from_ref(&s),
        SingularPolicy::Strict,
    )?;
    Ok(MallowsSelection {
        k_tilde,
        cp,
        f_tilde: p.fitted_regressors(),
    })
}

// First minimizer in iteration order; NaN never wins.
fn argmin_smallest(values: impl Iterator<Item = (usize, f64)>) -> (usize, f64) {
    values
        .fold(None, |best: Option<(usize, f64)>, (k, v)| match best {
            Some((_, bv)) if !(v < bv) => best,
            _ if v.is_nan() => best,
            _ => Some((k, v)),
        })
        .expect("non-empty grid")
}

/// Moments of the preliminary fit, shared by every `k`.
#[derive(Debug, Clone)]
pub struct PreliminaryFit {
    pub beta_tilde: DVector<f64>,
    pub eps_tilde: DVector<f64>,
    pub f_tilde: DMatrix<f64>,
    pub u_tilde: DMatrix<f64>,
    /// `f'f / N`.
    pub h_tilde: DMatrix<f64>,
    pub sigma2_eps: f64,
    /// `u'eps / N`.
    pub sigma_ueps: DVector<f64>,
    /// `u'u / N`.
    pub sigma_u: DMatrix<f64>,
    /// Number of leading instruments used.
    pub mallows_k: usize,
}

/// 2SLS on the Mallows-selected leading instruments (or the first
/// `k_override` of them) and the residual moments derived from it.
pub fn preliminary_fit(ds: &DataSet, k_override: Option<usize>) -> Result<PreliminaryFit> {
    let basis = Arc::new(InstrumentBasis::new(ds)?);
    preliminary_with_basis(ds, &basis, k_override)
}

pub(crate) fn preliminary_with_basis(
    ds: &DataSet,
    basis: &Arc<InstrumentBasis>,
    k_override: Option<usize>,
) -> Result<PreliminaryFit> {
    let kk = ds.instrument_count();
    let k_tilde = match k_override {
        Some(k) if k < ds.d1() || k > kk => {
            return Err(Error::InvalidParameter(format!(
                "preliminary instrument count {k} outside [{}, {kk}]",
                ds.d1()
            )))
        }
        Some(k) => k,
        None => mallows_with_basis(ds, basis)?.k_tilde,
    };
    let s = SubsetIndex::full(k_tilde);
    let p = CsaProjection::from_subsets(
        basis,
        k_tilde,
        std::slice::from_ref(&s),
        SingularPolicy::Strict,
    )?;
    let xpx_inv = checked_inverse(&p.xpx(), "preliminary second-stage matrix", MAX_CONDITION)?;
    let beta_tilde = &xpx_inv * p.xpy();
    let n = ds.n() as f64;
    let x = ds.regressors();
    let eps_tilde = ds.y() - x * &beta_tilde;
    let f_tilde = p.fitted_regressors();
    let u_tilde = x - &f_tilde;
    let mut h_tilde = f_tilde.tr_mul(&f_tilde) / n;
    linalg::symmetrize(&mut h_tilde);
    let mut sigma_u = u_tilde.tr_mul(&u_tilde) / n;
    linalg::symmetrize(&mut sigma_u);
    Ok(PreliminaryFit {
        sigma2_eps: eps_tilde.norm_squared() / n,
        sigma_ueps: u_tilde.tr_mul(&eps_tilde) / n,
        beta_tilde,
        eps_tilde,
        f_tilde,
        u_tilde,
        h_tilde,
        sigma_u,
        mallows_k: k_tilde,
    })
}

/// `e_1` of length `d`, the default contrast.
pub fn default_lambda(d: usize) -> DVector<f64> {
    let mut l = DVector::zeros(d);
    l[0] = 1.0;
    l
}

pub(crate) fn check_lambda(lambda: &DVector<f64>, d: usize) -> Result<()> {
    if lambda.len() != d {
        return Err(Error::InvalidParameter(format!(
            "lambda has length {}, expected {d}",
            lambda.len()
        )));
    }
    if lambda.iter().all(|&v| v == 0.0) || lambda.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter(
            "lambda must be finite and nonzero".into(),
        ));
    }
    Ok(())
}

/// The feasible criterion with everything that does not depend on `k` precomputed.
#[derive(Debug, Clone)]
pub struct FeasibleCriterion {
    n: f64,
    xtx: DMatrix<f64>,
    h_inv: DMatrix<f64>,
    a: DVector<f64>,
    sigma2_eps: f64,
    sigma_lambda_eps_sq: f64,
    sigma_u: DMatrix<f64>,
}

impl FeasibleCriterion {
    pub fn new(ds: &DataSet, pre: &PreliminaryFit, lambda: &DVector<f64>) -> Result<Self> {
        check_lambda(lambda, ds.d())?;
        let h_inv = checked_inverse(&pre.h_tilde, "preliminary H", MAX_H_CONDITION)?;
        let a = &h_inv * lambda;
        let sle = a.dot(&pre.sigma_ueps);
        Ok(FeasibleCriterion {
            n: ds.n() as f64,
            xtx: ds.regressors().tr_mul(ds.regressors()),
            h_inv,
            a,
            sigma2_eps: pre.sigma2_eps,
            sigma_lambda_eps_sq: sle * sle,
            sigma_u: pre.sigma_u.clone(),
        })
    }

    /// `(bias, variance)` parts of the criterion at `proj`.
    pub fn terms(&self, proj: &CsaProjection) -> (f64, f64) {
        let n = self.n;
        let k = proj.k() as f64;
        let xpx = proj.xpx();
        let xp2x = proj.xp2x();
        // X'(I-P)^2 X = X'X - 2 X'PX + X'P^2X
        let resid2 = &self.xtx - &xpx * 2.0 + xp2x;
        let resid1 = &self.xtx - &xpx;
        let e = resid2 / n + &self.sigma_u * ((2.0 * k - proj.trace_sq()) / n);
        let xi = resid1 / n + &self.sigma_u * (k / n) - &self.sigma_u;
        let xi_a = &xi * &self.a;
        let variance = self.sigma2_eps * (quad(&e, &self.a) - quad(&self.h_inv, &xi_a));
        let bias = self.sigma_lambda_eps_sq * k * k / n;
        (bias, variance)
    }

    pub fn value(&self, proj: &CsaProjection) -> f64 {
        let (b, v) = self.terms(proj);
        b + v
    }
}

/// `Ŝ_λ(k)` at `proj.k()`.
pub fn feasible_mse(
    ds: &DataSet,
    pre: &PreliminaryFit,
    proj: &CsaProjection,
    lambda: &DVector<f64>,
) -> Result<f64> {
    if proj.n() != ds.n() {
        return Err(Error::Dimension(
            "projection built on a different data set".into(),
        ));
    }
    let v = FeasibleCriterion::new(ds, pre, lambda)?.value(proj);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Criterion {
            k: proj.k(),
            source: Box::new(Error::Singular("criterion value".into())),
        })
    }
}

/// Subset sampling settings applied to every `k`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingConfig {
    /// Random subsets per `k`; `None` averages the complete subset.
    pub draws: Option<usize>,
    /// Master seed; the seed for `k` is derived from it.
    pub seed: u64,
    pub projection: ProjectionOptions,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            draws: Some(DEFAULT_DRAWS),
            seed: 0,
            projection: ProjectionOptions::default(),
        }
    }
}

impl SamplingConfig {
    pub fn plan(&self, total: usize, k: usize) -> Result<SubsetPlan> {
        SubsetPlan::new(total, k, self.draws, derive_seed(self.seed, k as u64))
    }
}

/// `Ŝ_λ(k)` over the grid with its smallest minimizer.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CriterionCurve {
    pub k_grid: Vec<usize>,
    pub values: Vec<f64>,
    pub k_hat: usize,
    /// More than one `k` attained the minimum and the smallest was taken.
    pub ties_broken_to_smallest: bool,
}

impl CriterionCurve {
    pub fn from_values(k_grid: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if k_grid.is_empty() || k_grid.len() != values.len() {
            return Err(Error::Dimension(
                "criterion grid and values differ in length".into(),
            ));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Criterion {
                k: k_grid[i],
                source: Box::new(Error::Singular("criterion value".into())),
            });
        }
        let (k_hat, min) = argmin_smallest(k_grid.iter().copied().zip(values.iter().copied()));
        let ties = values.iter().filter(|&&v| v == min).count() > 1;
        Ok(CriterionCurve {
            k_grid,
            values,
            k_hat,
            ties_broken_to_smallest: ties,
        })
    }

    pub fn value_at(&self, k: usize) -> Option<f64> {
        self.k_grid
            .iter()
            .position(|&g| g == k)
            .map(|i| self.values[i])
    }

    pub fn min_value(&self) -> f64 {
        self.value_at(self.k_hat).expect("k_hat on grid")
    }
}

/// A criterion curve with the projections it was evaluated on, aligned with `curve.k_grid`.
#[derive(Debug, Clone)]
pub struct KSelection {
    pub curve: CriterionCurve,
    pub projections: Vec<CsaProjection>,
}

impl KSelection {
    pub fn selected(&self) -> &CsaProjection {
        let i = self
            .curve
            .k_grid
            .iter()
            .position(|&k| k == self.curve.k_hat)
            .expect("k_hat on grid");
        &self.projections[i]
    }
}

/// Evaluates `Ŝ_λ(k)` for `k = d1..=K` and picks the smallest minimizer.
pub fn select_k(
    ds: &DataSet,
    pre: &PreliminaryFit,
    lambda: &DVector<f64>,
    sampling: &SamplingConfig,
) -> Result<CriterionCurve> {
    let basis = Arc::new(InstrumentBasis::new(ds)?);
    Ok(select_k_with_basis(ds, &basis, pre, lambda, sampling)?.curve)
}

pub fn select_k_with_basis(
    ds: &DataSet,
    basis: &Arc<InstrumentBasis>,
    pre: &PreliminaryFit,
    lambda: &DVector<f64>,
    sampling: &SamplingConfig,
) -> Result<KSelection> {
    let crit = FeasibleCriterion::new(ds, pre, lambda)?;
    let kk = ds.instrument_count();
    let grid: Vec<usize> = (ds.d1()..=kk).collect();
    let plans = grid
        .iter()
        .map(|&k| sampling.plan(kk, k))
        .collect::<Result<Vec<_>>>()?;
    let projections = build_projections(basis, &plans, sampling.projection)?;
    let values = projections.iter().map(|p| crit.value(p)).collect();
    let curve = CriterionCurve::from_values(grid, values)?;
    Ok(KSelection { curve, projections })
}

/// True quantities for the infeasible criterion.
#[derive(Debug, Clone)]
pub struct OracleInputs {
    /// True reduced form `f` (N x d).
    pub f: DMatrix<f64>,
    pub sigma2_eps: f64,
    pub sigma_ueps: DVector<f64>,
    /// Relevant excluded instruments, when known.
    pub relevant: Option<Vec<bool>>,
}

impl OracleInputs {
    /// `f'f / N`.
    pub fn h(&self) -> DMatrix<f64> {
        self.f.tr_mul(&self.f) / self.f.nrows() as f64
    }
}

/// Bias and variance parts of `λ' S(k) λ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleTerms {
    pub bias: f64,
    pub variance: f64,
}

impl OracleTerms {
    pub fn total(&self) -> f64 {
        self.bias + self.variance
    }
}

/// `λ' S(k) λ` with `S(k) = H^-1 [σ_uε σ_uε' k²/N + σ²_ε f'(I-P)(I-P_f)(I-P)f / N] H^-1`.
#[derive(Debug, Clone)]
pub struct OracleCriterion {
    n: f64,
    f: DMatrix<f64>,
    f_basis: DMatrix<f64>,
    a: DVector<f64>,
    sigma2_eps: f64,
    bias_scale: f64,
}

impl OracleCriterion {
    pub fn new(ora: &OracleInputs, lambda: &DVector<f64>, n: usize) -> Result<Self> {
        let (rows, d) = ora.f.shape();
        if rows != n || ora.sigma_ueps.len() != d {
            return Err(Error::Dimension(
                "oracle inputs inconsistent with N and d".into(),
            ));
        }
        check_lambda(lambda, d)?;
        let f_basis = linalg::orthonormal_basis(&ora.f)
            .map_err(|_| Error::Singular("true reduced form f".into()))?;
        let h_inv = checked_inverse(&ora.h(), "true H", MAX_CONDITION)?;
        let a = &h_inv * lambda;
        let sle = a.dot(&ora.sigma_ueps);
        Ok(OracleCriterion {
            n: n as f64,
            f: ora.f.clone(),
            f_basis,
            a,
            sigma2_eps: ora.sigma2_eps,
            bias_scale: sle * sle,
        })
    }

    /// Terms at `proj`, with the bias multiplied by `inflation²`.
    pub fn terms_inflated(&self, proj: &CsaProjection, inflation: f64) -> Result<OracleTerms> {
        let u = &self.f - proj.apply(&self.f)?;
        let w = &u - &self.f_basis * self.f_basis.tr_mul(&u);
        let v = w.tr_mul(&w) / self.n;
        let k = proj.k() as f64;
        Ok(OracleTerms {
            bias: self.bias_scale * inflation * inflation * k * k / self.n,
            variance: self.sigma2_eps * quad(&v, &self.a),
        })
    }

    pub fn terms(&self, proj: &CsaProjection) -> Result<OracleTerms> {
        self.terms_inflated(proj, 1.0)
    }
}

/// Infeasible `λ' S(k) λ` at `proj.k()`.
pub fn oracle_mse(
    ora: &OracleInputs,
    proj: &CsaProjection,
    lambda: &DVector<f64>,
    n: usize,
) -> Result<f64> {
    Ok(OracleCriterion::new(ora, lambda, n)?.terms(proj)?.total())
}

/// Oracle under irrelevant instruments, with the subset classification used.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IrrelevantOracle {
    pub terms: OracleTerms,
    /// Subsets in the evaluated collection.
    pub m: usize,
    /// Subsets holding enough relevant instruments.
    pub m1: usize,
}

impl IrrelevantOracle {
    pub fn inflation(&self) -> f64 {
        self.m as f64 / self.m1 as f64
    }
}

/// Oracle criterion when some instruments are irrelevant: the projection
/// averages only subsets with at least `d1` relevant members, and the bias
/// is inflated by `(M / M1)²`, both counted on the collection `plan` yields.
pub fn oracle_mse_irrelevant_detail(
    ora: &OracleInputs,
    ds: &DataSet,
    plan: &SubsetPlan,
    lambda: &DVector<f64>,
) -> Result<IrrelevantOracle> {
    let relevant = ora
        .relevant
        .as_ref()
        .ok_or_else(|| Error::InvalidParameter("relevance mask required".into()))?;
    if relevant.len() != ds.instrument_count() {
        return Err(Error::Dimension(format!(
            "relevance mask has {} entries for {} instruments",
            relevant.len(),
            ds.instrument_count()
        )));
    }
    let needed = ds.d1();
    let collection = plan.subsets(crate::subsets::DEFAULT_ENUMERATION_CAP)?;
    let m = collection.len();
    let kept: Vec<SubsetIndex> = collection
        .into_iter()
        .filter(|s| s.members().iter().filter(|&&j| relevant[j]).count() >= needed)
        .collect();
    if kept.is_empty() {
        return Err(Error::NoRelevantSubsets {
            k: plan.k(),
            needed,
        });
    }
    let m1 = kept.len();
    let basis = Arc::new(InstrumentBasis::new(ds)?);
    let policy = if plan.is_exact() {
        SingularPolicy::Strict
    } else {
        SingularPolicy::Drop
    };
    let proj = CsaProjection::from_subsets(&basis, plan.k(), &kept, policy)?;
    let oracle = OracleCriterion::new(ora, lambda, ds.n())?;
    let terms = oracle.terms_inflated(&proj, m as f64 / m1 as f64)?;
    Ok(IrrelevantOracle { terms, m, m1 })
}

pub fn oracle_mse_irrelevant(
    ora: &OracleInputs,
    ds: &DataSet,
    plan: &SubsetPlan,
    lambda: &DVector<f64>,
) -> Result<f64> {
    Ok(oracle_mse_irrelevant_detail(ora, ds, plan, lambda)?
        .terms
        .total())
}

/// `a'b` exposed for callers assembling criteria by hand.
pub fn contrast(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    dot(a.as_slice(), b.as_slice())
}
