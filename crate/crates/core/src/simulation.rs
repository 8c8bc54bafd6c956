//! Monte Carlo designs with a single endogenous regressor and an intercept.
//!
//! ```text
//! y_i = b0 + b1 Y_i + eps_i,   Y_i = pi'Z_i + u_i,   Z_i ~ N(0, Sz)
//! Sz = (1 - rho) I + rho 11',  (eps_i, u_i) ~ N(0, [[1, s], [s, 1]])
//! ```
//!
//! `pi` is scaled so that the population first-stage R² is `rf2`. Each
//! replication draws from its own generator seeded with `seed ^ rep`, so
//! reports do not depend on the number of worker threads.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize};

use crate::criterion::{preliminary_with_basis, OracleCriterion, OracleInputs, SamplingConfig};
use crate::dataset::{ColumnNames, DataSet, INTERCEPT_COLUMN};
use crate::error::{Error, Result};
use crate::estimators::{
    csa_with_basis, dn_with_basis, ols, tsls_with_basis, CsaConfig, EstimationResult, Method,
};
use crate::inference::confidence_interval;
use crate::linalg::{median, quantile};
use crate::projection::InstrumentBasis;

/// Shape of the first-stage coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalShape {
    /// Equal coefficients.
    Flat,
    /// `(1 - j/(K+1))^4`.
    Decreasing,
    /// Zero for the first half, decreasing over the second half.
    HalfZero,
}

impl SignalShape {
    /// Unscaled weight of instrument `j` (1-based) out of `k`.
    fn weight(self, j: usize, k: usize) -> f64 {
        let (jf, kf) = (j as f64, k as f64);
        match self {
            SignalShape::Flat => 1.0,
            SignalShape::Decreasing => (1.0 - jf / (kf + 1.0)).powi(4),
            SignalShape::HalfZero => {
                let half = kf / 2.0;
                if jf <= half {
                    0.0
                } else {
                    (1.0 - (jf - half) / (half + 1.0)).powi(4)
                }
            }
        }
    }
}

impl fmt::Display for SignalShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SignalShape::Flat => "flat",
            SignalShape::Decreasing => "decreasing",
            SignalShape::HalfZero => "half_zero",
        })
    }
}

/// How the flat design's common coefficient is scaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlatNormalization {
    /// Divide by `K + K(K-1) rho_z`, so the population R² equals `rf2`.
    #[default]
    Correlated,
    /// Divide by `K` as if the instruments were uncorrelated. The population
    /// R² is then `v / (1 + v)` with `v = rf2 (1 + (K-1) rho_z) / (1 - rf2)`.
    /// The published flat-signal tables follow this scaling.
    Independent,
}

fn default_beta() -> [f64; 2] {
    [0.0, 0.1]
}

/// One simulation design.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DgpConfig {
    /// Sample size `N`.
    pub n: usize,
    /// Number of excluded instruments `K`.
    pub k: usize,
    pub rho_z: f64,
    pub sigma_ueps: f64,
    pub rf2: f64,
    pub signal: SignalShape,
    /// `(b0, b1)`.
    #[serde(default = "default_beta")]
    pub beta: [f64; 2],
    #[serde(default)]
    pub seed: u64,
    /// Only used by the flat signal.
    #[serde(default)]
    pub flat_normalization: FlatNormalization,
}

impl DgpConfig {
    pub fn new(
        n: usize,
        k: usize,
        rho_z: f64,
        sigma_ueps: f64,
        rf2: f64,
        signal: SignalShape,
    ) -> Self {
        DgpConfig {
            n,
            k,
            rho_z,
            sigma_ueps,
            rf2,
            signal,
            beta: default_beta(),
            seed: 0,
            flat_normalization: FlatNormalization::Correlated,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.k == 0 {
            return bad("K must be at least 1".into());
        }
        if self.n <= self.k + 1 {
            return bad(format!("N = {} must exceed K + 1 = {}", self.n, self.k + 1));
        }
        let lower = if self.k > 1 {
            -1.0 / (self.k as f64 - 1.0)
        } else {
            -1.0
        };
        if !(self.rho_z > lower && self.rho_z < 1.0) {
            return bad(format!("rho_z = {} outside ({lower}, 1)", self.rho_z));
        }
        if !(self.sigma_ueps > -1.0 && self.sigma_ueps < 1.0) {
            return bad(format!("sigma_ueps = {} outside (-1, 1)", self.sigma_ueps));
        }
        if !(self.rf2 >= 0.0 && self.rf2 < 1.0) {
            return bad(format!("rf2 = {} outside [0, 1)", self.rf2));
        }
        if self.beta.iter().any(|b| !b.is_finite()) {
            return bad("beta must be finite".into());
        }
        Ok(())
    }

    /// `(1 - rho) I + rho 11'`.
    pub fn instrument_covariance(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.k, self.k, |i, j| if i == j { 1.0 } else { self.rho_z })
    }
}

/// `pi'Sz pi / (pi'Sz pi + 1)`, the population first-stage R².
pub fn population_rf2(pi: &DVector<f64>, rho_z: f64) -> f64 {
    let sum: f64 = pi.iter().sum();
    let sq = pi.norm_squared();
    let v = sq + rho_z * (sum * sum - sq);
    v / (v + 1.0)
}

/// First-stage coefficients for `cfg.signal`, scaled to hit `cfg.rf2`.
pub fn solve_pi(cfg: &DgpConfig) -> Result<DVector<f64>> {
    cfg.validate()?;
    let w = DVector::from_fn(cfg.k, |j, _| cfg.signal.weight(j + 1, cfg.k));
    if cfg.rf2 == 0.0 {
        return Ok(DVector::zeros(cfg.k));
    }
    let sum: f64 = w.iter().sum();
    let sq = w.norm_squared();
    let rho = match (cfg.signal, cfg.flat_normalization) {
        (SignalShape::Flat, FlatNormalization::Independent) => 0.0,
        _ => cfg.rho_z,
    };
    let denom = sq + rho * (sum * sum - sq);
    if !(denom > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "signal normalization {denom} is not positive"
        )));
    }
    let c = (cfg.rf2 / (1.0 - cfg.rf2) / denom).sqrt();
    Ok(w * c)
}

/// Population quantities behind a generated sample.
#[derive(Debug, Clone)]
pub struct Truth {
    /// Coefficients in regressor order: `b1`, then the intercept `b0`.
    pub beta: DVector<f64>,
    pub pi: DVector<f64>,
    /// Reduced form `[pi'Z_i, 1]` (N x 2).
    pub f: DMatrix<f64>,
    pub sigma_ueps: f64,
}

impl Truth {
    pub fn oracle_inputs(&self) -> OracleInputs {
        OracleInputs {
            f: self.f.clone(),
            sigma2_eps: 1.0,
            sigma_ueps: DVector::from_vec(vec![self.sigma_ueps, 0.0]),
            relevant: Some(self.pi.iter().map(|&p| p != 0.0).collect()),
        }
    }
}

/// One sample from the design, with the intercept as the exogenous regressor.
pub fn generate(cfg: &DgpConfig) -> Result<(DataSet, Truth)> {
    let pi = solve_pi(cfg)?;
    let chol = Cholesky::new(cfg.instrument_covariance()).ok_or_else(|| {
        Error::InvalidParameter("instrument covariance not positive definite".into())
    })?;
    let l = chol.l();
    let (n, k) = (cfg.n, cfg.k);
    let s = cfg.sigma_ueps;
    let t = (1.0 - s * s).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut e = DVector::zeros(k);
    let mut z = DMatrix::zeros(n, k);
    let mut endog = DMatrix::zeros(n, 1);
    let mut y = DVector::zeros(n);
    let mut f = DMatrix::from_element(n, 2, 1.0);
    for i in 0..n {
        for v in e.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        let zi = &l * &e;
        let e1: f64 = StandardNormal.sample(&mut rng);
        let e2: f64 = StandardNormal.sample(&mut rng);
        let (eps, u) = (e1, s * e1 + t * e2);
        let signal = pi.dot(&zi);
        z.set_row(i, &zi.transpose());
        f[(i, 0)] = signal;
        endog[(i, 0)] = signal + u;
        y[i] = cfg.beta[0] + cfg.beta[1] * endog[(i, 0)] + eps;
    }
    let names = ColumnNames {
        outcome: "y".into(),
        endogenous: vec!["Y".into()],
        exogenous: vec![INTERCEPT_COLUMN.into()],
        instruments: (1..=k).map(|j| format!("z{j}")).collect(),
    };
    let ds = DataSet::new(y, endog, DMatrix::from_element(n, 1, 1.0), z)?.with_names(names)?;
    let truth = Truth {
        beta: DVector::from_vec(vec![cfg.beta[1], cfg.beta[0]]),
        pi,
        f,
        sigma_ueps: s,
    };
    Ok((ds, truth))
}

/// A method column of the report.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MethodSpec {
    pub label: String,
    pub method: Method,
    /// CSA at a fixed subset size.
    pub fixed_k: Option<usize>,
}

impl MethodSpec {
    pub fn new(method: Method) -> Self {
        MethodSpec {
            label: method.label().to_string(),
            method,
            fixed_k: None,
        }
    }

    pub fn csa_fixed(k: usize) -> Self {
        MethodSpec {
            label: format!("CSA.{k}"),
            method: Method::Csa,
            fixed_k: Some(k),
        }
    }

    /// OLS, 2SLS, DN, CSA and CSA.1.
    pub fn standard() -> Vec<Self> {
        let mut v: Vec<Self> = [Method::Ols, Method::Tsls, Method::Dn, Method::Csa]
            .into_iter()
            .map(Self::new)
            .collect();
        v.push(Self::csa_fixed(1));
        v
    }
}

impl FromStr for MethodSpec {
    type Err = Error;

    /// `ols`, `2sls`/`tsls`, `dn`, `csa`, or `csa.<k>`.
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        if let Some(k) = lower.strip_prefix("csa.") {
            let k = k
                .parse::<usize>()
                .map_err(|_| Error::InvalidParameter(format!("bad subset size in `{s}`")))?;
            return Ok(Self::csa_fixed(k));
        }
        Ok(Self::new(lower.parse()?))
    }
}

/// Number of random subsets per `k`, or the complete subset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SubsetDraws {
    #[default]
    All,
    Count(usize),
}

impl SubsetDraws {
    pub fn as_option(self) -> Option<usize> {
        match self {
            SubsetDraws::All => None,
            SubsetDraws::Count(r) => Some(r),
        }
    }
}

impl fmt::Display for SubsetDraws {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SubsetDraws::All => f.write_str("all"),
            SubsetDraws::Count(r) => write!(f, "{r}"),
        }
    }
}

impl FromStr for SubsetDraws {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "all" | "exact" => Ok(SubsetDraws::All),
            t => match t.parse::<usize>() {
                Ok(0) | Err(_) => Err(Error::InvalidParameter(format!(
                    "subset draws must be `all` or a positive integer, got `{s}`"
                ))),
                Ok(r) => Ok(SubsetDraws::Count(r)),
            },
        }
    }
}

impl<'de> Deserialize<'de> for SubsetDraws {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(usize),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(0) => Err(serde::de::Error::custom("subset draws must be positive")),
            Raw::Num(r) => Ok(SubsetDraws::Count(r)),
            Raw::Text(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

impl Serialize for SubsetDraws {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            SubsetDraws::All => s.serialize_str("all"),
            SubsetDraws::Count(r) => s.serialize_u64(*r as u64),
        }
    }
}

/// Replication settings shared by every design cell.
#[derive(Debug, Clone)]
pub struct SimulationSettings {
    pub reps: usize,
    /// Worker threads; all available when `None`.
    pub jobs: Option<usize>,
    pub methods: Vec<MethodSpec>,
    pub draws: SubsetDraws,
    pub level: f64,
    /// Record the oracle ratio `S(k_hat) / min_k S(k)` for selected CSA.
    pub track_oracle: bool,
    /// Largest tolerated share of failed replications per method.
    pub max_failure_rate: f64,
}

impl Default for SimulationSettings {
    fn default() -> Self {
        SimulationSettings {
            reps: 1000,
            jobs: None,
            methods: MethodSpec::standard(),
            draws: SubsetDraws::Count(crate::subsets::DEFAULT_DRAWS),
            level: 0.95,
            track_oracle: false,
            max_failure_rate: 0.05,
        }
    }
}

/// One method on one replication.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Draw {
    /// Estimate of the endogenous coefficient.
    pub estimate: f64,
    pub covered: bool,
    pub k_hat: Option<usize>,
    pub oracle_ratio: Option<f64>,
}

/// Outcomes of one replication, aligned with the method list.
#[derive(Debug, Clone)]
pub struct RepRecord {
    pub rep: usize,
    pub draws: Vec<std::result::Result<Draw, String>>,
}

/// Summary statistics of one method.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodRow {
    pub method: String,
    pub mse: f64,
    pub mean_bias: f64,
    pub mad: f64,
    pub median_bias: f64,
    pub range_10_90: f64,
    pub coverage_95: f64,
    pub mean_k_hat: Option<f64>,
    pub median_k_hat: Option<f64>,
    pub mean_oracle_ratio: Option<f64>,
    pub completed: usize,
    pub failures: usize,
}

#[derive(Debug, Clone)]
pub struct SimulationReport {
    pub config: DgpConfig,
    pub draws: SubsetDraws,
    pub reps: usize,
    pub rows: Vec<MethodRow>,
    pub records: Vec<RepRecord>,
}

impl SimulationReport {
    pub fn row(&self, label: &str) -> Option<&MethodRow> {
        self.rows.iter().find(|r| r.method == label)
    }
}

/// Metrics for estimates of a parameter with true value `truth`.
pub fn summarize(label: &str, draws: &[Draw], truth: f64, failures: usize) -> MethodRow {
    let m = draws.len() as f64;
    let err: Vec<f64> = draws.iter().map(|d| d.estimate - truth).collect();
    let est: Vec<f64> = draws.iter().map(|d| d.estimate).collect();
    let med = median(&est);
    let abs_dev: Vec<f64> = est.iter().map(|e| (e - med).abs()).collect();
    let ks: Vec<f64> = draws
        .iter()
        .filter_map(|d| d.k_hat.map(|k| k as f64))
        .collect();
    let ratios: Vec<f64> = draws.iter().filter_map(|d| d.oracle_ratio).collect();
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    MethodRow {
        method: label.to_string(),
        mse: err.iter().map(|e| e * e).sum::<f64>() / m,
        mean_bias: err.iter().sum::<f64>() / m,
        mad: median(&abs_dev),
        median_bias: median(&err),
        range_10_90: quantile(&est, 0.9) - quantile(&est, 0.1),
        coverage_95: draws.iter().filter(|d| d.covered).count() as f64 / m,
        mean_k_hat: mean(&ks),
        median_k_hat: (!ks.is_empty()).then(|| median(&ks)),
        mean_oracle_ratio: mean(&ratios),
        completed: draws.len(),
        failures,
    }
}

fn rep_seed(master: u64, rep: usize) -> u64 {
    master ^ rep as u64
}

/// Runs every method on one replication.
pub fn run_replication(
    cfg: &DgpConfig,
    settings: &SimulationSettings,
    rep: usize,
) -> Result<RepRecord> {
    let mut c = *cfg;
    c.seed = rep_seed(cfg.seed, rep);
    let (ds, truth) = generate(&c)?;
    let b1 = truth.beta[0];
    let basis = Arc::new(InstrumentBasis::new(&ds)?);
    let csa = CsaConfig {
        sampling: SamplingConfig {
            draws: settings.draws.as_option(),
            seed: c.seed,
            ..Default::default()
        },
        ..Default::default()
    };
    let needs_pre = settings
        .methods
        .iter()
        .any(|m| m.method == Method::Dn || (m.method == Method::Csa && m.fixed_k.is_none()));
    let pre = needs_pre.then(|| preliminary_with_basis(&ds, &basis, None));
    let lambda = csa.lambda_for(ds.d());

    let finish = |r: EstimationResult, ratio: Option<f64>| -> Result<Draw> {
        let ci = confidence_interval(&r, settings.level)?;
        Ok(Draw {
            estimate: r.beta_hat[0],
            covered: ci[0].contains(b1),
            k_hat: r.k_hat,
            oracle_ratio: ratio,
        })
    };
    let pre_ref = || -> Result<&_> {
        match &pre {
            Some(Ok(p)) => Ok(p),
            Some(Err(e)) => Err(Error::Singular(format!("preliminary fit: {e}"))),
            None => unreachable!("preliminary fit requested"),
        }
    };
    let draws = settings
        .methods
        .iter()
        .map(|spec| {
            let out = match (spec.method, spec.fixed_k) {
                (Method::Ols, _) => ols(&ds).and_then(|r| finish(r, None)),
                (Method::Tsls, _) => {
                    tsls_with_basis(&ds, &basis, None).and_then(|r| finish(r, None))
                }
                (Method::Dn, _) => pre_ref()
                    .and_then(|p| dn_with_basis(&ds, &basis, p, &lambda))
                    .and_then(|r| finish(r, None)),
                (Method::Csa, Some(k)) => {
                    let cfg = CsaConfig {
                        fixed_k: Some(k),
                        ..csa.clone()
                    };
                    csa_with_basis(&ds, &basis, None, &cfg).and_then(|(r, _)| finish(r, None))
                }
                (Method::Csa, None) => pre_ref().and_then(|p| {
                    let (r, sel) = csa_with_basis(&ds, &basis, Some(p), &csa)?;
                    let ratio = if settings.track_oracle {
                        let sel = sel.expect("selection ran");
                        let oracle = OracleCriterion::new(&truth.oracle_inputs(), &lambda, ds.n())?;
                        let s = sel
                            .projections
                            .iter()
                            .map(|p| Ok(oracle.terms(p)?.total()))
                            .collect::<Result<Vec<f64>>>()?;
                        let min = s.iter().cloned().fold(f64::INFINITY, f64::min);
                        let at = s[sel
                            .curve
                            .k_grid
                            .iter()
                            .position(|&k| k == sel.curve.k_hat)
                            .expect("on grid")];
                        Some(at / min)
                    } else {
                        None
                    };
                    finish(r, ratio)
                }),
            };
            out.map_err(|e| e.to_string())
        })
        .collect();
    Ok(RepRecord { rep, draws })
}

/// Replicates `cfg` and aggregates per-method metrics for the endogenous coefficient.
pub fn run_design(cfg: &DgpConfig, settings: &SimulationSettings) -> Result<SimulationReport> {
    cfg.validate()?;
    if settings.reps == 0 {
        return Err(Error::InvalidParameter("reps must be at least 1".into()));
    }
    if settings.methods.is_empty() {
        return Err(Error::InvalidParameter("no methods requested".into()));
    }
    let run = || -> Result<Vec<RepRecord>> {
        (0..settings.reps)
            .into_par_iter()
            .map(|rep| run_replication(cfg, settings, rep))
            .collect()
    };
    let records = match settings.jobs {
        Some(j) => rayon::ThreadPoolBuilder::new()
            .num_threads(j.max(1))
            .build()
            .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?
            .install(run)?,
        None => run()?,
    };
    let truth = cfg.beta[1];
    let mut rows = Vec::with_capacity(settings.methods.len());
    for (m, spec) in settings.methods.iter().enumerate() {
        let mut ok = Vec::with_capacity(records.len());
        let mut failed = 0;
        for rec in &records {
            match &rec.draws[m] {
                Ok(d) => ok.push(*d),
                Err(e) => {
                    failed += 1;
                    log::debug!("{} failed on replication {}: {e}", spec.label, rec.rep);
                }
            }
        }
        if failed as f64 > settings.max_failure_rate * settings.reps as f64 || ok.is_empty() {
            return Err(Error::TooManyFailures {
                failed,
                total: settings.reps,
            });
        }
        if failed > 0 {
            log::warn!(
                "{}: {failed} of {} replications failed and were excluded",
                spec.label,
                settings.reps
            );
        }
        rows.push(summarize(&spec.label, &ok, truth, failed));
    }
    Ok(SimulationReport {
        config: *cfg,
        draws: settings.draws,
        reps: settings.reps,
        rows,
        records,
    })
}

/// A value or a list of values in a sweep grid.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T: Clone> OneOrMany<T> {
    fn values(&self) -> Vec<T> {
        match self {
            OneOrMany::One(v) => vec![v.clone()],
            OneOrMany::Many(v) => v.clone(),
        }
    }
}

fn default_draws() -> OneOrMany<SubsetDraws> {
    OneOrMany::One(SubsetDraws::Count(crate::subsets::DEFAULT_DRAWS))
}

/// Grid of designs; every combination of the listed values is a cell.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignGrid {
    pub n: OneOrMany<usize>,
    pub k: OneOrMany<usize>,
    pub rho_z: OneOrMany<f64>,
    pub sigma_ueps: OneOrMany<f64>,
    pub rf2: OneOrMany<f64>,
    pub signal: OneOrMany<SignalShape>,
    #[serde(default)]
    pub beta: Option<[f64; 2]>,
    #[serde(default)]
    pub flat_normalization: FlatNormalization,
    /// Random subsets per `k` (`"all"` for the complete subset).
    #[serde(default = "default_draws")]
    pub subsets_r: OneOrMany<SubsetDraws>,
}

/// A design and its subset sampling setting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DesignCell {
    pub config: DgpConfig,
    pub draws: SubsetDraws,
}

impl DesignGrid {
    /// All cells, varying the last field fastest. The seed is left at zero.
    pub fn cells(&self) -> Vec<DesignCell> {
        let mut out = Vec::new();
        for &n in &self.n.values() {
            for &k in &self.k.values() {
                for &rho in &self.rho_z.values() {
                    for &s in &self.sigma_ueps.values() {
                        for &rf2 in &self.rf2.values() {
                            for &signal in &self.signal.values() {
                                for &draws in &self.subsets_r.values() {
                                    let mut config = DgpConfig::new(n, k, rho, s, rf2, signal);
                                    if let Some(b) = self.beta {
                                        config.beta = b;
                                    }
                                    config.flat_normalization = self.flat_normalization;
                                    out.push(DesignCell { config, draws });
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

const TABLE_COLUMNS: [&str; 8] = [
    "MSE", "Bias", "MAD", "Med.Bias", "Range", "Coverage", "Mean(k)", "Med(k)",
];

/// `x` with six significant digits.
pub fn sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let mag = x.abs().log10().floor() as i32;
    if !(-4..6).contains(&mag) {
        return format!("{x:.5e}");
    }
    let decimals = (5 - mag).max(0) as usize;
    format!("{x:.decimals$}")
}

fn describe(cfg: &DgpConfig, draws: SubsetDraws) -> String {
    format!(
        "N={} K={} rho_z={} sigma_ueps={} rf2={} signal={} R={draws}",
        cfg.n, cfg.k, cfg.rho_z, cfg.sigma_ueps, cfg.rf2, cfg.signal
    )
}

impl SimulationReport {
    /// Aligned text table, one row per method.
    pub fn text_table(&self) -> String {
        let mut cells: Vec<Vec<String>> = vec![std::iter::once("Method".to_string())
            .chain(TABLE_COLUMNS.iter().map(|s| s.to_string()))
            .collect()];
        for r in &self.rows {
            let opt = |v: Option<f64>| v.map(sig6).unwrap_or_else(|| "-".into());
            cells.push(vec![
                r.method.clone(),
                sig6(r.mse),
                sig6(r.mean_bias),
                sig6(r.mad),
                sig6(r.median_bias),
                sig6(r.range_10_90),
                sig6(r.coverage_95),
                opt(r.mean_k_hat),
                opt(r.median_k_hat),
            ]);
        }
        let widths: Vec<usize> = (0..cells[0].len())
            .map(|c| cells.iter().map(|row| row[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = format!(
            "{} reps={}\n",
            describe(&self.config, self.draws),
            self.reps
        );
        for row in &cells {
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (v, w))| {
                    if i == 0 {
                        format!("{v:<w$}")
                    } else {
                        format!("{v:>w$}")
                    }
                })
                .collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
        }
        out
    }

    pub const CSV_HEADER: [&'static str; 22] = [
        "n",
        "k",
        "rho_z",
        "sigma_ueps",
        "rf2",
        "signal",
        "subsets_r",
        "reps",
        "seed",
        "method",
        "mse",
        "mean_bias",
        "mad",
        "median_bias",
        "range_10_90",
        "coverage_95",
        "mean_k_hat",
        "median_k_hat",
        "mean_oracle_ratio",
        "completed",
        "failures",
        "beta1",
    ];

    /// CSV rows (no header) with full-precision numbers.
    pub fn write_csv_rows<W: Write>(&self, w: &mut csv::Writer<W>) -> Result<()> {
        let c = &self.config;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                c.n.to_string(),
                c.k.to_string(),
                c.rho_z.to_string(),
                c.sigma_ueps.to_string(),
                c.rf2.to_string(),
                c.signal.to_string(),
                self.draws.to_string(),
                self.reps.to_string(),
                c.seed.to_string(),
                r.method.clone(),
                r.mse.to_string(),
                r.mean_bias.to_string(),
                r.mad.to_string(),
                r.median_bias.to_string(),
                r.range_10_90.to_string(),
                r.coverage_95.to_string(),
                opt(r.mean_k_hat),
                opt(r.median_k_hat),
                opt(r.mean_oracle_ratio),
                r.completed.to_string(),
                r.failures.to_string(),
                c.beta[1].to_string(),
            ])
            .map_err(|e| Error::InvalidParameter(format!("writing report: {e}")))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DgpConfig {
        let mut c = DgpConfig::new(60, 6, 0.5, 0.9, 0.1, SignalShape::Flat);
        c.seed = 17;
        c
    }

    #[test]
    fn zero_rf2_gives_zero_signal() {
        let mut c = small();
        c.rf2 = 0.0;
        assert!(solve_pi(&c).unwrap().iter().all(|&p| p == 0.0));
    }

    #[test]
    fn flat_signal_value() {
        let c = DgpConfig::new(100, 20, 0.0, 0.9, 0.1, SignalShape::Flat);
        let pi = solve_pi(&c).unwrap();
        let expect = (0.1_f64 / (20.0 * 0.9)).sqrt();
        assert!(pi.iter().all(|&p| (p - expect).abs() < 1e-15));
        assert!((expect - 0.074536).abs() < 1e-6);
    }

    #[test]
    fn every_shape_hits_target_rf2() {
        for shape in [
            SignalShape::Flat,
            SignalShape::Decreasing,
            SignalShape::HalfZero,
        ] {
            for &(k, rho) in &[(20, 0.5), (30, 0.0), (7, 0.3), (1, 0.0)] {
                let c = DgpConfig::new(200, k, rho, 0.5, 0.1, shape);
                let pi = solve_pi(&c).unwrap();
                // independent evaluation of pi' Sz pi / (pi' Sz pi + 1)
                let sz = c.instrument_covariance();
                let v = (pi.transpose() * sz * &pi)[(0, 0)];
                assert!((v / (v + 1.0) - 0.1).abs() < 1e-12, "{shape} K={k}");
                assert!((population_rf2(&pi, rho) - 0.1).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn independent_flat_scaling() {
        let mut c = DgpConfig::new(100, 20, 0.5, 0.9, 0.01, SignalShape::Flat);
        c.flat_normalization = FlatNormalization::Independent;
        let pi = solve_pi(&c).unwrap();
        let expect = (0.01_f64 / (20.0 * 0.99)).sqrt();
        assert!(pi.iter().all(|&p| (p - expect).abs() < 1e-15));
        let v = 0.01 / 0.99 * (1.0 + 19.0 * 0.5);
        assert!((population_rf2(&pi, 0.5) - v / (1.0 + v)).abs() < 1e-12);
        // other shapes ignore the setting
        c.signal = SignalShape::HalfZero;
        assert!((population_rf2(&solve_pi(&c).unwrap(), 0.5) - 0.01).abs() < 1e-12);
    }

    #[test]
    fn half_zero_has_leading_zeros() {
        let c = DgpConfig::new(200, 20, 0.5, 0.5, 0.1, SignalShape::HalfZero);
        let pi = solve_pi(&c).unwrap();
        assert!(pi.rows(0, 10).iter().all(|&p| p == 0.0));
        assert!(pi.rows(10, 10).iter().all(|&p| p > 0.0));
        let odd = DgpConfig::new(200, 7, 0.5, 0.5, 0.1, SignalShape::HalfZero);
        let pi = solve_pi(&odd).unwrap();
        assert_eq!(pi.iter().filter(|&&p| p == 0.0).count(), 3);
    }

    #[test]
    fn decreasing_signal_decreases() {
        let c = DgpConfig::new(200, 10, 0.5, 0.5, 0.1, SignalShape::Decreasing);
        let pi = solve_pi(&c).unwrap();
        assert!(pi.as_slice().windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = small();
        c.rho_z = 1.2;
        assert!(c.validate().is_err());
        let mut c = small();
        c.sigma_ueps = 1.0;
        assert!(c.validate().is_err());
        let mut c = small();
        c.rf2 = 1.0;
        assert!(c.validate().is_err());
        let mut c = small();
        c.n = 7;
        assert!(c.validate().is_err());
        let mut c = small();
        c.rho_z = -0.25;
        assert!(c.validate().is_err());
        c.rho_z = -0.15;
        assert!(c.validate().is_ok());
    }

    #[test]
    fn generation_is_deterministic_and_valid() {
        let (a, ta) = generate(&small()).unwrap();
        let (b, _) = generate(&small()).unwrap();
        assert_eq!(a, b);
        assert!(a.validate().is_empty());
        assert_eq!(a.names().exogenous, vec![INTERCEPT_COLUMN.to_string()]);
        let fitted = a.instruments() * &ta.pi;
        assert!((fitted - ta.f.column(0)).amax() < 1e-12);
        let mut c = small();
        c.seed = 18;
        assert_ne!(generate(&c).unwrap().0, a);
    }

    fn corr(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn large_sample_moments() {
        let mut c = DgpConfig::new(100_000, 3, 0.5, 0.0, 0.1, SignalShape::Flat);
        c.seed = 3;
        let (ds, t) = generate(&c).unwrap();
        let z = ds.instruments();
        for a in 0..3 {
            for b in (a + 1)..3 {
                let r = corr(z.column(a).as_slice(), z.column(b).as_slice());
                assert!((r - 0.5).abs() < 0.01, "corr({a},{b}) = {r}");
            }
        }
        // with beta = (0, 0.1): eps = y - 0.1 Y, u = Y - f
        let eps: Vec<f64> = (0..c.n)
            .map(|i| ds.y()[i] - 0.1 * ds.endogenous()[(i, 0)])
            .collect();
        let u: Vec<f64> = (0..c.n)
            .map(|i| ds.endogenous()[(i, 0)] - t.f[(i, 0)])
            .collect();
        assert!(corr(&eps, &u).abs() < 0.01);
        let yv = ds.endogenous().column(0);
        let r2 = corr(yv.as_slice(), t.f.column(0).as_slice()).powi(2);
        assert!((r2 - 0.1).abs() < 0.01, "{r2}");
    }

    #[test]
    fn noiseless_ols_is_exact() {
        // sigma_ueps = 0 and a tiny error variance are not expressible, so use
        // the metric summary directly
        let d = Draw {
            estimate: 0.1,
            covered: true,
            k_hat: None,
            oracle_ratio: None,
        };
        let row = summarize("OLS", &[d], 0.1, 0);
        assert_eq!(row.mse, 0.0);
        assert_eq!(row.coverage_95, 1.0);
        assert!(row.mean_k_hat.is_none());
    }

    #[test]
    fn metric_definitions() {
        let est = [0.0, 0.1, 0.2, 0.5, 1.0];
        let draws: Vec<Draw> = est
            .iter()
            .enumerate()
            .map(|(i, &e)| Draw {
                estimate: e,
                covered: i % 2 == 0,
                k_hat: Some(i + 1),
                oracle_ratio: Some(1.0 + i as f64),
            })
            .collect();
        let row = summarize("CSA", &draws, 0.1, 0);
        assert!((row.mean_bias - 0.26).abs() < 1e-12);
        assert!((row.mse - (0.01 + 0.0 + 0.01 + 0.16 + 0.81) / 5.0).abs() < 1e-12);
        assert!((row.median_bias - 0.1).abs() < 1e-12);
        // deviations from the median 0.2: 0.2, 0.1, 0, 0.3, 0.8
        assert!((row.mad - 0.2).abs() < 1e-12);
        // type 7: q90 = 0.5 + 0.6 * 0.5, q10 = 0.04
        assert!((row.range_10_90 - (0.8 - 0.04)).abs() < 1e-12);
        assert!((row.coverage_95 - 0.6).abs() < 1e-12);
        assert_eq!(row.mean_k_hat, Some(3.0));
        assert_eq!(row.median_k_hat, Some(3.0));
        assert_eq!(row.mean_oracle_ratio, Some(3.0));
        assert!(row.mse >= row.mean_bias * row.mean_bias - 1e-12);
    }

    #[test]
    fn design_runs_and_is_reproducible() {
        let settings = SimulationSettings {
            reps: 6,
            jobs: Some(1),
            draws: SubsetDraws::Count(20),
            track_oracle: true,
            ..Default::default()
        };
        let a = run_design(&small(), &settings).unwrap();
        let b = run_design(
            &small(),
            &SimulationSettings {
                jobs: Some(3),
                ..settings.clone()
            },
        )
        .unwrap();
        assert_eq!(a.rows, b.rows);
        assert_eq!(a.rows.len(), 5);
        let csa = a.row("CSA").unwrap();
        assert!(csa.mean_oracle_ratio.unwrap() >= 1.0);
        assert_eq!(a.row("CSA.1").unwrap().median_k_hat, Some(1.0));
        for r in &a.rows {
            assert!(r.mse >= r.mean_bias * r.mean_bias - 1e-12);
            assert!((0.0..=1.0).contains(&r.coverage_95));
        }
    }

    #[test]
    fn zero_reps_rejected() {
        let settings = SimulationSettings {
            reps: 0,
            ..Default::default()
        };
        assert!(run_design(&small(), &settings).is_err());
    }

    #[test]
    fn method_specs_parse() {
        assert_eq!(
            "CSA.1".parse::<MethodSpec>().unwrap(),
            MethodSpec::csa_fixed(1)
        );
        assert_eq!("2sls".parse::<MethodSpec>().unwrap().label, "2SLS");
        assert!("csa.x".parse::<MethodSpec>().is_err());
        assert!("knn".parse::<MethodSpec>().is_err());
    }

    #[test]
    fn grid_expands_cartesian_product() {
        let json = r#"{"n": 100, "k": 20, "rho_z": 0.5, "sigma_ueps": 0.9,
            "rf2": [0.01, 0.1], "signal": ["flat", "half_zero"], "subsets_r": ["all", 500]}"#;
        let g: DesignGrid = serde_json::from_str(json).unwrap();
        let cells = g.cells();
        assert_eq!(cells.len(), 8);
        assert_eq!(cells[0].draws, SubsetDraws::All);
        assert_eq!(cells[1].draws, SubsetDraws::Count(500));
        assert_eq!(cells[7].config.signal, SignalShape::HalfZero);
        assert_eq!(cells[7].config.beta, [0.0, 0.1]);
        let bad = r#"{"n": 100, "k": 20, "rho_z": 0.5, "sigma_ueps": 0.9, "rf2": 0.1, "signal": "flat", "extra": 1}"#;
        assert!(serde_json::from_str::<DesignGrid>(bad).is_err());
        assert!("0".parse::<SubsetDraws>().is_err());
    }

    #[test]
    fn six_significant_digits() {
        assert_eq!(sig6(0.0760001234), "0.0760001");
        assert_eq!(sig6(1.13), "1.13000");
        assert_eq!(sig6(-0.815), "-0.815000");
        assert_eq!(sig6(123456.7), "123457");
        assert_eq!(sig6(0.0), "0");
    }

    #[test]
    fn table_and_csv_render() {
        let settings = SimulationSettings {
            reps: 3,
            jobs: Some(1),
            methods: vec![MethodSpec::new(Method::Ols), MethodSpec::csa_fixed(2)],
            draws: SubsetDraws::All,
            ..Default::default()
        };
        let r = run_design(&small(), &settings).unwrap();
        let t = r.text_table();
        assert!(t.contains("Coverage"));
        assert!(t.lines().any(|l| l.starts_with("CSA.2")));
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(SimulationReport::CSV_HEADER).unwrap();
        r.write_csv_rows(&mut w).unwrap();
        let bytes = w.into_inner().unwrap();
        assert_eq!(String::from_utf8(bytes).unwrap().lines().count(), 3);
    }
}
