//! Heteroskedasticity- and cluster-robust covariance and normal confidence intervals.
//!
//! For an estimator `β̂ = (X̂'X)^{-1} X̂'y` with `X̂ = P X`,
//!
//! ```text
//! Σ̂ = N (X'PX)^{-1} [ Σ_g X̂_g' ε̂_g ε̂_g' X̂_g ] (X'PX)^{-1},   ε̂ = y - X β̂
//! ```
//!
//! and the standard errors are `sqrt(diag(Σ̂ / N))`. Inference is conditional
//! on the subset size used to build `P`.

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::dataset::{ClusterLabels, DataSet};
use crate::error::{Error, Result};
use crate::estimators::EstimationResult;
use crate::linalg::{checked_inverse, symmetrize, MAX_CONDITION};
use crate::projection::CsaProjection;

/// A partition of the rows `0..N` into clusters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterPartition {
    groups: Vec<Vec<usize>>,
    n: usize,
}

impl ClusterPartition {
    /// Validates that `groups` are disjoint, non-empty, and cover `0..n`.
    pub fn new(groups: Vec<Vec<usize>>, n: usize) -> Result<Self> {
        let mut seen = vec![false; n];
        for g in &groups {
            if g.is_empty() {
                return Err(Error::InvalidParameter("empty cluster".into()));
            }
            for &i in g {
                if i >= n || seen[i] {
                    return Err(Error::InvalidParameter(format!(
                        "row {i} is out of range or in two clusters"
                    )));
                }
                seen[i] = true;
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidParameter(format!(
                "row {i} belongs to no cluster"
            )));
        }
        Ok(ClusterPartition { groups, n })
    }

    /// One cluster per row: the heteroskedasticity-robust case.
    pub fn singletons(n: usize) -> Self {
        ClusterPartition {
            groups: (0..n).map(|i| vec![i]).collect(),
            n,
        }
    }

    pub fn from_labels(labels: &ClusterLabels) -> Self {
        let mut groups = vec![Vec::new(); labels.group_count()];
        for (i, &g) in labels.ids.iter().enumerate() {
            groups[g].push(i);
        }
        ClusterPartition {
            groups,
            n: labels.ids.len(),
        }
    }

    /// The data set's clusters, or singletons when it has none.
    pub fn for_dataset(ds: &DataSet) -> Self {
        match ds.clusters() {
            Some(c) => Self::from_labels(c),
            None => Self::singletons(ds.n()),
        }
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    /// Number of clusters `G`.
    pub fn g(&self) -> usize {
        self.groups.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.groups.iter().map(Vec::len).collect()
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn is_singletons(&self) -> bool {
        self.groups.len() == self.n
    }
}

/// `Σ̂` for fitted regressors `xhat` (N x d), regressors `x`, and residuals.
pub fn sandwich(
    x: &DMatrix<f64>,
    xhat: &DMatrix<f64>,
    resid: &DVector<f64>,
    part: &ClusterPartition,
) -> Result<DMatrix<f64>> {
    let (n, d) = x.shape();
    if xhat.shape() != (n, d) || resid.len() != n || part.n() != n {
        return Err(Error::Dimension(
            "sandwich inputs disagree on N or d".into(),
        ));
    }
    let mut bread = xhat.tr_mul(x);
    symmetrize(&mut bread);
    let bread_inv = checked_inverse(&bread, "X'PX in covariance", MAX_CONDITION)?;
    let mut meat = DMatrix::zeros(d, d);
    let mut score = DVector::zeros(d);
    for g in part.groups() {
        score.fill(0.0);
        for &i in g {
            for j in 0..d {
                score[j] += xhat[(i, j)] * resid[i];
            }
        }
        meat.ger(1.0, &score, &score, 1.0);
    }
    let mut sigma = &bread_inv * meat * &bread_inv * n as f64;
    symmetrize(&mut sigma);
    Ok(sigma)
}

/// Robust `Σ̂` for the CSA estimator `beta_hat` built from `proj`.
pub fn robust_vcov(
    ds: &DataSet,
    proj: &CsaProjection,
    beta_hat: &DVector<f64>,
    part: &ClusterPartition,
) -> Result<DMatrix<f64>> {
    if proj.n() != ds.n() || beta_hat.len() != ds.d() {
        return Err(Error::Dimension(
            "projection or coefficients do not match the data".into(),
        ));
    }
    let x = ds.regressors();
    let resid = ds.y() - x * beta_hat;
    sandwich(x, &proj.fitted_regressors(), &resid, part)
}

/// `sqrt(diag(Σ̂ / N))`, with tiny negative rounding clamped to zero.
pub fn standard_errors(sigma: &DMatrix<f64>, n: usize) -> DVector<f64> {
    DVector::from_iterator(
        sigma.nrows(),
        sigma
            .diagonal()
            .iter()
            .map(|v| (v / n as f64).max(0.0).sqrt()),
    )
}

/// Standard normal quantile.
pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    pub fn contains(&self, v: f64) -> bool {
        self.lower <= v && v <= self.upper
    }
}

/// `β̂_j ± z se_j` from the covariance attached to `result`.
pub fn confidence_interval(result: &EstimationResult, level: f64) -> Result<Vec<Interval>> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "confidence level {level} outside (0, 1)"
        )));
    }
    let se = result
        .se
        .as_ref()
        .ok_or_else(|| Error::InvalidParameter("result carries no covariance".into()))?;
    let z = normal_quantile(0.5 * (1.0 + level));
    Ok(result
        .beta_hat
        .iter()
        .zip(se.iter())
        .map(|(b, s)| Interval {
            lower: b - z * s,
            upper: b + z * s,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::Method;
    use crate::projection::csa_projection;
    use crate::subsets::SubsetPlan;
    use crate::testutil::random_dataset;

    fn setup(seed: u64) -> (DataSet, CsaProjection, DVector<f64>) {
        let ds = random_dataset(30, 1, 1, 5, seed);
        let proj = csa_projection(&ds, &SubsetPlan::exact(5, 2).unwrap()).unwrap();
        let beta = proj.xpx().try_inverse().unwrap() * proj.xpy();
        (ds, proj, beta)
    }

    #[test]
    fn exact_fit_has_zero_covariance() {
        let base = random_dataset(30, 1, 1, 5, 2);
        let beta = DVector::from_vec(vec![0.4, 1.0]);
        let y = base.regressors() * &beta;
        let ds = DataSet::new(
            y,
            base.endogenous().clone(),
            base.exogenous().clone(),
            base.instruments().clone(),
        )
        .unwrap();
        let proj = csa_projection(&ds, &SubsetPlan::exact(5, 3).unwrap()).unwrap();
        let s = robust_vcov(&ds, &proj, &beta, &ClusterPartition::singletons(30)).unwrap();
        assert!(s.amax() < 1e-20);
    }

    #[test]
    fn singletons_match_direct_sum() {
        for seed in 0..5 {
            let (ds, proj, beta) = setup(seed);
            let sigma = robust_vcov(&ds, &proj, &beta, &ClusterPartition::singletons(30)).unwrap();
            let p = proj.matrix();
            let x = ds.regressors();
            let e = ds.y() - x * &beta;
            let bread = (x.transpose() * &p * x).try_inverse().unwrap();
            let mut meat = DMatrix::zeros(2, 2);
            for i in 0..30 {
                let row = p.row(i) * x; // P_{i.} X
                meat += row.transpose() * &row * (e[i] * e[i]);
            }
            let oracle = &bread * meat * &bread * 30.0;
            assert!((&sigma - &oracle).amax() < 1e-12 * oracle.amax().max(1.0));
        }
    }

    #[test]
    fn two_clusters_match_block_assembly() {
        let ds = random_dataset(6, 1, 0, 2, 11);
        let proj = csa_projection(&ds, &SubsetPlan::exact(2, 1).unwrap()).unwrap();
        let beta = proj.xpx().try_inverse().unwrap() * proj.xpy();
        let part = ClusterPartition::new(vec![vec![0, 2, 4], vec![1, 3, 5]], 6).unwrap();
        let sigma = robust_vcov(&ds, &proj, &beta, &part).unwrap();
        let p = proj.matrix();
        let x = ds.regressors();
        let e = ds.y() - x * &beta;
        let bread = (x.transpose() * &p * x).try_inverse().unwrap();
        let mut meat = DMatrix::zeros(1, 1);
        for g in part.groups() {
            let mut pg = DMatrix::zeros(g.len(), 6);
            let mut eg = DVector::zeros(g.len());
            for (r, &i) in g.iter().enumerate() {
                pg.set_row(r, &p.row(i));
                eg[r] = e[i];
            }
            let t = x.transpose() * pg.transpose() * &eg;
            meat += &t * t.transpose();
        }
        let oracle = &bread * meat * &bread * 6.0;
        assert!((sigma[(0, 0)] - oracle[(0, 0)]).abs() < 1e-12 * oracle[(0, 0)].abs().max(1.0));
    }

    #[test]
    fn covariance_is_symmetric_psd_and_scales() {
        let (ds, proj, beta) = setup(9);
        let part = ClusterPartition::new(
            (0..10).map(|g| vec![3 * g, 3 * g + 1, 3 * g + 2]).collect(),
            30,
        )
        .unwrap();
        let s = robust_vcov(&ds, &proj, &beta, &part).unwrap();
        assert!((&s - s.transpose()).norm() <= 1e-10 * s.norm());
        let eig = s.clone().symmetric_eigenvalues();
        assert!(eig.min() >= -1e-8 * s.norm());

        let c = -2.5;
        let scaled = ds.scale_outcome(c);
        let s2 = robust_vcov(&scaled, &proj, &(&beta * c), &part).unwrap();
        assert!((&s2 - &s * (c * c)).amax() <= 1e-10 * s2.amax());
    }

    #[test]
    fn partition_validation() {
        assert!(ClusterPartition::new(vec![vec![0, 1], vec![1, 2]], 3).is_err());
        assert!(ClusterPartition::new(vec![vec![0, 1]], 3).is_err());
        assert!(ClusterPartition::new(vec![vec![0, 1], vec![]], 2).is_err());
        let p = ClusterPartition::new(vec![vec![2, 0], vec![1]], 3).unwrap();
        assert_eq!(p.g(), 2);
        assert_eq!(p.sizes(), vec![2, 1]);
        assert!(ClusterPartition::singletons(4).is_singletons());
        let labels = ClusterLabels::from_labels(&["b", "a", "b"]);
        let p = ClusterPartition::from_labels(&labels);
        assert_eq!(p.groups(), &[vec![0, 2], vec![1]]);
    }

    fn result(beta: f64, se: f64) -> EstimationResult {
        EstimationResult {
            method: Method::Tsls,
            beta_hat: DVector::from_vec(vec![beta]),
            names: vec!["x".into()],
            k_hat: None,
            criterion_curve: None,
            vcov: Some(DMatrix::from_element(1, 1, se * se)),
            se: Some(DVector::from_vec(vec![se])),
            subsets_used: None,
        }
    }

    #[test]
    fn intervals_use_normal_quantile() {
        assert!((normal_quantile(0.975) - 1.959964).abs() < 1e-6);
        let ci = confidence_interval(&result(0.1, 0.05), 0.95).unwrap();
        assert!((ci[0].lower - 0.002).abs() < 1e-3);
        assert!((ci[0].upper - 0.198).abs() < 1e-3);
        assert!(ci[0].contains(0.1));
        let ci = confidence_interval(&result(0.3, 0.0), 0.95).unwrap();
        assert_eq!((ci[0].lower, ci[0].upper), (0.3, 0.3));
        assert!(!ci[0].contains(0.1));
        let mut r = result(0.1, 0.05);
        r.se = None;
        assert!(confidence_interval(&r, 0.95).is_err());
        assert!(confidence_interval(&result(0.1, 0.05), 1.0).is_err());
    }
}
