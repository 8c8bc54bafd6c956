//! Per-subset projectors and their equal-weight average `P^k`.
//!
//! Every subset design `[Z_S, X_exog]` lies in the column space of the full
//! instrument matrix `[Z, X_exog]`. With an orthonormal basis `Q` (N x r) of that
//! space, each subset projector is `Q A_S Q'` for an r x r projector `A_S`, so the
//! average is `P^k = Q Ā Q'`. All averaging happens on the r x r core; the
//! dense N x N operator is only formed on request.
//!
//! Subset projectors are built by Gram-Schmidt (two passes) on the reduced
//! coordinates, exogenous directions first. A subset is singular when a new
//! column keeps less than [`RANK_TOL`] of its norm after orthogonalization.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::dataset::DataSet;
use crate::error::{Error, Result};
use crate::linalg::{self, dot, RANK_TOL};
use crate::subsets::{
    binomial_count, binomial_f64, SubsetIndex, SubsetPlan, DEFAULT_ENUMERATION_CAP,
};

/// What to do with a subset whose design matrix is rank-deficient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SingularPolicy {
    /// Error in exact mode, drop in sampled mode.
    #[default]
    Auto,
    /// Any singular subset is an error.
    Strict,
    /// Skip singular subsets and average over the rest.
    Drop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProjectionOptions {
    pub singular: SingularPolicy,
    /// Largest complete subset that exact mode will average.
    pub enumeration_cap: u64,
}

impl Default for ProjectionOptions {
    fn default() -> Self {
        ProjectionOptions {
            singular: SingularPolicy::Auto,
            enumeration_cap: DEFAULT_ENUMERATION_CAP,
        }
    }
}

/// Orthonormal coordinates for the span of all instruments and exogenous regressors.
#[derive(Debug, Clone)]
pub struct InstrumentBasis {
    n: usize,
    rank: usize,
    // None when the instrument space is all of R^N.
    q: Option<DMatrix<f64>>,
    instruments: Vec<Vec<f64>>,
    instrument_norms: Vec<f64>,
    // flattened d2 orthonormal vectors of length `rank`
    exog: Vec<f64>,
    x_coords: DMatrix<f64>,
    y_coords: DVector<f64>,
}

impl InstrumentBasis {
    pub fn new(ds: &DataSet) -> Result<Self> {
        let n = ds.n();
        let kk = ds.instrument_count();
        let d2 = ds.d2();
        let p = kk + d2;
        let mut z = DMatrix::zeros(n, p);
        z.columns_mut(0, kk).copy_from(ds.instruments());
        z.columns_mut(kk, d2).copy_from(ds.exogenous());

        let (q, coords) = if n > p {
            let qr = z.qr();
            (Some(qr.q()), qr.r())
        } else {
            (None, z)
        };
        let rank = coords.nrows();
        let instruments: Vec<Vec<f64>> = (0..kk)
            .map(|j| coords.column(j).iter().copied().collect())
            .collect();
        let instrument_norms = instruments.iter().map(|c| dot(c, c).sqrt()).collect();

        let mut exog = Vec::with_capacity(d2 * rank);
        let mut buf = vec![0.0; rank];
        for j in 0..d2 {
            let col: Vec<f64> = coords.column(kk + j).iter().copied().collect();
            if !extend_basis(&exog, rank, &col, &mut buf) {
                return Err(Error::Singular(
                    "included exogenous regressor matrix".into(),
                ));
            }
            exog.extend_from_slice(&buf);
        }

        let x_coords = match &q {
            Some(q) => q.tr_mul(ds.regressors()),
            None => ds.regressors().clone(),
        };
        let y_coords = match &q {
            Some(q) => q.tr_mul(ds.y()),
            None => ds.y().clone(),
        };
        Ok(InstrumentBasis {
            n,
            rank,
            q,
            instruments,
            instrument_norms,
            exog,
            x_coords,
            y_coords,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Dimension `r` of the reduced space.
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn instrument_count(&self) -> usize {
        self.instruments.len()
    }

    /// `Q' A` for an N-row matrix.
    fn reduce(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.q {
            Some(q) => q.tr_mul(a),
            None => a.clone(),
        }
    }

    /// `Q B` for an r-row matrix.
    fn expand(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.q {
            Some(q) => q * b,
            None => b.clone(),
        }
    }

    fn exog_part(&self) -> SymAcc {
        let mut acc = SymAcc::new(self.rank);
        for v in self.exog.chunks_exact(self.rank.max(1)) {
            acc.add_outer(v, 1.0);
        }
        acc
    }

    /// Orthonormal vectors completing the exogenous directions for `subset`,
    /// or `None` if the subset design is rank-deficient.
    fn subset_directions(&self, subset: &[usize]) -> Option<Vec<f64>> {
        let r = self.rank;
        let mut stack = self.exog.clone();
        let mut buf = vec![0.0; r];
        for &m in subset {
            if !self.extend(&stack, m, &mut buf) {
                return None;
            }
            stack.extend_from_slice(&buf);
        }
        Some(stack.split_off(self.exog.len()))
    }

    fn extend(&self, stack: &[f64], instrument: usize, out: &mut [f64]) -> bool {
        let norm0 = self.instrument_norms[instrument];
        extend_basis_scaled(stack, self.rank, &self.instruments[instrument], norm0, out)
    }
}

// Orthogonalizes `col` against the orthonormal vectors in `stack` (two passes)
// and normalizes into `out`. False when the remainder is negligible.
fn extend_basis(stack: &[f64], r: usize, col: &[f64], out: &mut [f64]) -> bool {
    let norm0 = dot(col, col).sqrt();
    extend_basis_scaled(stack, r, col, norm0, out)
}

fn extend_basis_scaled(stack: &[f64], r: usize, col: &[f64], norm0: f64, out: &mut [f64]) -> bool {
    if norm0 == 0.0 || r == 0 {
        return false;
    }
    out.copy_from_slice(col);
    for _ in 0..2 {
        for b in stack.chunks_exact(r) {
            let c = dot(b, out);
            for (o, bi) in out.iter_mut().zip(b) {
                *o -= c * bi;
            }
        }
    }
    let nrm = dot(out, out).sqrt();
    if nrm <= RANK_TOL * norm0 {
        return false;
    }
    for o in out.iter_mut() {
        *o /= nrm;
    }
    true
}

/// Upper-triangular accumulator for sums of outer products `w v v'`.
#[derive(Debug, Clone)]
struct SymAcc {
    r: usize,
    data: Vec<f64>,
}

impl SymAcc {
    fn new(r: usize) -> Self {
        SymAcc {
            r,
            data: vec![0.0; r * r],
        }
    }

    fn add_outer(&mut self, v: &[f64], w: f64) {
        let r = self.r;
        for i in 0..r {
            let wi = w * v[i];
            if wi == 0.0 {
                continue;
            }
            let row = &mut self.data[i * r + i..(i + 1) * r];
            for (x, vj) in row.iter_mut().zip(&v[i..]) {
                *x += wi * vj;
            }
        }
    }

    fn add_scaled(&mut self, other: &SymAcc, w: f64) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += w * b;
        }
    }

    fn to_matrix(&self) -> DMatrix<f64> {
        let r = self.r;
        DMatrix::from_fn(r, r, |i, j| {
            let (a, b) = if i <= j { (i, j) } else { (j, i) };
            self.data[a * r + b]
        })
    }
}

// Fixed-shape pairwise reduction, independent of how the parts were computed.
fn pairwise<T>(mut parts: Vec<T>, combine: impl Fn(T, T) -> T) -> Option<T> {
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(a) = it.next() {
            match it.next() {
                Some(b) => next.push(combine(a, b)),
                None => next.push(a),
            }
        }
        parts = next;
    }
    parts.pop()
}

const CHUNK: usize = 32;

struct ChunkSum {
    acc: SymAcc,
    used: usize,
    singular: Vec<usize>,
}

/// The averaged CSA-P matrix `P^k = Q Ā Q'` and its trace statistics.
#[derive(Debug, Clone)]
pub struct CsaProjection {
    basis: Arc<InstrumentBasis>,
    core: DMatrix<f64>,
    k: usize,
    count_used: usize,
    dropped: usize,
    trace: f64,
    trace_sq: f64,
    max_diag: f64,
}

impl CsaProjection {
    /// Average of the projectors for an explicit subset list.
    pub fn from_subsets(
        basis: &Arc<InstrumentBasis>,
        k: usize,
        subsets: &[SubsetIndex],
        policy: SingularPolicy,
    ) -> Result<Self> {
        if subsets.is_empty() {
            return Err(Error::InvalidParameter(format!(
                "no subsets to average at k = {k}"
            )));
        }
        let r = basis.rank;
        let parts: Vec<ChunkSum> = subsets
            .par_chunks(CHUNK)
            .enumerate()
            .map(|(c, chunk)| {
                let mut acc = SymAcc::new(r);
                let mut used = 0;
                let mut singular = Vec::new();
                for (i, s) in chunk.iter().enumerate() {
                    match basis.subset_directions(s.members()) {
                        Some(dirs) => {
                            for v in dirs.chunks_exact(r.max(1)) {
                                acc.add_outer(v, 1.0);
                            }
                            used += 1;
                        }
                        None => singular.push(c * CHUNK + i),
                    }
                }
                ChunkSum {
                    acc,
                    used,
                    singular,
                }
            })
            .collect();
        let total = pairwise(parts, |mut a, b| {
            a.acc.add_scaled(&b.acc, 1.0);
            a.used += b.used;
            a.singular.extend(b.singular);
            a
        })
        .expect("non-empty subset list");

        if total.used == 0 {
            return Err(Error::AllSubsetsSingular {
                k,
                attempted: subsets.len(),
            });
        }
        if let (Some(&first), SingularPolicy::Strict) = (total.singular.first(), policy) {
            return Err(Error::SingularSubset {
                k,
                subset: subsets[first].members().to_vec(),
            });
        }
        if !total.singular.is_empty() {
            log::warn!(
                "dropped {} of {} rank-deficient subsets at k = {k}",
                total.singular.len(),
                subsets.len()
            );
        }
        let mut core = basis.exog_part();
        core.add_scaled(&total.acc, 1.0 / total.used as f64);
        Ok(Self::from_core(
            basis.clone(),
            k,
            core.to_matrix(),
            total.used,
            total.singular.len(),
        ))
    }

    /// Builds the projection described by `plan`.
    pub fn build(
        basis: &Arc<InstrumentBasis>,
        plan: &SubsetPlan,
        opts: ProjectionOptions,
    ) -> Result<Self> {
        let mut v = build_projections(basis, std::slice::from_ref(plan), opts)?;
        Ok(v.remove(0))
    }

    fn from_core(
        basis: Arc<InstrumentBasis>,
        k: usize,
        core: DMatrix<f64>,
        count_used: usize,
        dropped: usize,
    ) -> Self {
        let trace = core.trace();
        let trace_sq = core.iter().map(|v| v * v).sum();
        let max_diag = match &basis.q {
            Some(q) => {
                let qa = q * &core;
                (0..basis.n)
                    .map(|i| dot_rows(&qa, q, i))
                    .fold(f64::NEG_INFINITY, f64::max)
            }
            None => core.diagonal().max(),
        };
        CsaProjection {
            basis,
            core,
            k,
            count_used,
            dropped,
            trace,
            trace_sq,
            max_diag,
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Number of subset projectors actually averaged.
    pub fn count_used(&self) -> usize {
        self.count_used
    }

    /// Singular subsets skipped under the drop policy.
    pub fn dropped(&self) -> usize {
        self.dropped
    }

    /// `tr(P)`; equals `k + d2` for nonsingular subsets.
    pub fn trace(&self) -> f64 {
        self.trace
    }

    /// `tr(P^2)`.
    pub fn trace_sq(&self) -> f64 {
        self.trace_sq
    }

    pub fn max_diag(&self) -> f64 {
        self.max_diag
    }

    /// `tr(P^s)`.
    pub fn trace_power(&self, s: u32) -> f64 {
        let mut m = DMatrix::identity(self.core.nrows(), self.core.nrows());
        for _ in 0..s {
            m = &m * &self.core;
        }
        m.trace()
    }

    /// The r x r core `Ā` with `P = Q Ā Q'`.
    pub fn core(&self) -> &DMatrix<f64> {
        &self.core
    }

    pub fn basis(&self) -> &Arc<InstrumentBasis> {
        &self.basis
    }

    pub fn n(&self) -> usize {
        self.basis.n
    }

    /// Dense N x N matrix.
    pub fn matrix(&self) -> DMatrix<f64> {
        match &self.basis.q {
            Some(q) => {
                let qa = q * &self.core;
                let mut p = qa * q.transpose();
                linalg::symmetrize(&mut p);
                p
            }
            None => self.core.clone(),
        }
    }

    /// `P A` for an N-row matrix.
    pub fn apply(&self, a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if a.nrows() != self.basis.n {
            return Err(Error::Dimension(format!(
                "operand has {} rows, projection is {}x{}",
                a.nrows(),
                self.basis.n,
                self.basis.n
            )));
        }
        Ok(self.basis.expand(&(&self.core * self.basis.reduce(a))))
    }

    /// `P X` for the regressors of the data set the basis was built from.
    pub fn fitted_regressors(&self) -> DMatrix<f64> {
        self.basis.expand(&(&self.core * &self.basis.x_coords))
    }

    /// `X' P X`.
    pub fn xpx(&self) -> DMatrix<f64> {
        let xc = &self.basis.x_coords;
        let mut m = xc.tr_mul(&(&self.core * xc));
        linalg::symmetrize(&mut m);
        m
    }

    /// `X' P^2 X`.
    pub fn xp2x(&self) -> DMatrix<f64> {
        let px = &self.core * &self.basis.x_coords;
        px.tr_mul(&px)
    }

    /// `X' P y`.
    pub fn xpy(&self) -> DVector<f64> {
        self.basis
            .x_coords
            .tr_mul(&(&self.core * &self.basis.y_coords))
    }
}

fn dot_rows(a: &DMatrix<f64>, b: &DMatrix<f64>, i: usize) -> f64 {
    (0..a.ncols()).map(|j| a[(i, j)] * b[(i, j)]).sum()
}

/// Builds one projection per plan. Exact plans under a strict policy share a
/// single pass over the prefix tree of all subsets.
pub fn build_projections(
    basis: &Arc<InstrumentBasis>,
    plans: &[SubsetPlan],
    opts: ProjectionOptions,
) -> Result<Vec<CsaProjection>> {
    let kk = basis.instrument_count();
    for plan in plans {
        if plan.total() != kk {
            return Err(Error::Dimension(format!(
                "plan over {} instruments, data has {kk}",
                plan.total()
            )));
        }
        if plan.is_exact() {
            let count = binomial_count(kk, plan.k())?;
            if count > opts.enumeration_cap.into() {
                return Err(Error::EnumerationCap {
                    k: plan.k(),
                    count: count.to_string(),
                    cap: opts.enumeration_cap,
                });
            }
        }
    }
    let strict_exact = |p: &SubsetPlan| {
        p.is_exact() && matches!(opts.singular, SingularPolicy::Auto | SingularPolicy::Strict)
    };
    let tree_ks: Vec<usize> = plans
        .iter()
        .filter(|p| strict_exact(p))
        .map(|p| p.k())
        .collect();
    let mut tree = if tree_ks.is_empty() {
        Vec::new()
    } else {
        exact_tree(basis, &tree_ks)?
    };
    tree.reverse();

    let mut out = Vec::with_capacity(plans.len());
    for plan in plans {
        if strict_exact(plan) {
            out.push(tree.pop().expect("one core per exact plan"));
            continue;
        }
        let policy = match opts.singular {
            SingularPolicy::Auto => SingularPolicy::Drop,
            p => p,
        };
        let subsets = plan.subsets(opts.enumeration_cap)?;
        out.push(CsaProjection::from_subsets(
            basis,
            plan.k(),
            &subsets,
            policy,
        )?);
    }
    Ok(out)
}

// Exact averages for several k in one depth-first pass. A node is a sorted
// prefix (s_1 < ... < s_j); its Gram-Schmidt direction enters every completed
// k-subset below it, and there are C(K-1-s_j, k-j) of those. Directions are
// summed into buckets keyed by (j, s_j) and weighted per k at the end.
fn exact_tree(basis: &Arc<InstrumentBasis>, ks: &[usize]) -> Result<Vec<CsaProjection>> {
    let kk = basis.instrument_count();
    let r = basis.rank;
    let kmax = *ks.iter().max().expect("non-empty");
    // smallest requested k at or above each depth
    let kmin_from: Vec<usize> = (0..=kmax)
        .map(|j| {
            ks.iter()
                .copied()
                .filter(|&k| k >= j)
                .min()
                .unwrap_or(usize::MAX)
        })
        .collect();
    let last_allowed = |depth: usize| -> Option<usize> {
        let kmin = kmin_from[depth];
        (kmin != usize::MAX && kk + depth > kmin).then(|| kk + depth - 1 - kmin)
    };

    struct Walk<'a> {
        basis: &'a InstrumentBasis,
        kmax: usize,
        buckets: Vec<SymAcc>,
        kk: usize,
        path: Vec<usize>,
        stack: Vec<f64>,
    }

    impl Walk<'_> {
        fn visit(
            &mut self,
            depth: usize,
            start: usize,
            last_allowed: &dyn Fn(usize) -> Option<usize>,
        ) -> Option<Vec<usize>> {
            let lmax = last_allowed(depth + 1)?;
            let r = self.basis.rank;
            let mut buf = vec![0.0; r];
            for l in start..=lmax.min(self.kk - 1) {
                if !self.basis.extend(&self.stack, l, &mut buf) {
                    let mut bad = self.path.clone();
                    bad.push(l);
                    return Some(bad);
                }
                self.buckets[depth * self.kk + l].add_outer(&buf, 1.0);
                if depth + 1 < self.kmax {
                    self.stack.extend_from_slice(&buf);
                    self.path.push(l);
                    let res = self.visit(depth + 1, l + 1, last_allowed);
                    self.path.pop();
                    self.stack.truncate(self.stack.len() - r);
                    if res.is_some() {
                        return res;
                    }
                }
            }
            None
        }
    }

    let mut walk = Walk {
        basis,
        kmax,
        buckets: vec![SymAcc::new(r); kmax * kk],
        kk,
        path: Vec::new(),
        stack: basis.exog.clone(),
    };
    if let Some(prefix) = walk.visit(0, 0, &last_allowed) {
        let k = kmin_from[prefix.len()];
        let mut subset = prefix;
        while subset.len() < k {
            subset.push(subset.last().unwrap() + 1);
        }
        return Err(Error::SingularSubset { k, subset });
    }

    let exog = basis.exog_part();
    let mut out = Vec::with_capacity(ks.len());
    for &k in ks {
        let m = binomial_f64(kk, k);
        let mut acc = exog.clone();
        for j in 0..k {
            for l in 0..kk {
                let w = binomial_f64(kk - 1 - l, k - 1 - j);
                if w > 0.0 {
                    acc.add_scaled(&walk.buckets[j * kk + l], w / m);
                }
            }
        }
        out.push(CsaProjection::from_core(
            basis.clone(),
            k,
            acc.to_matrix(),
            m as usize,
            0,
        ));
    }
    Ok(out)
}

/// `[Z_S, X_exog]`: selected instruments followed by the included exogenous regressors.
pub fn subset_design(ds: &DataSet, s: &SubsetIndex) -> DMatrix<f64> {
    let n = ds.n();
    let k = s.len();
    let mut z = DMatrix::zeros(n, k + ds.d2());
    for (c, &m) in s.members().iter().enumerate() {
        z.set_column(c, &ds.instruments().column(m));
    }
    z.columns_mut(k, ds.d2()).copy_from(ds.exogenous());
    z
}

/// Dense `Z (Z'Z)^{-1} Z'`, rejecting rank-deficient designs.
pub fn projection_matrix(z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    linalg::dense_projector(z)
}

/// Convenience: basis plus projection for one plan.
pub fn csa_projection(ds: &DataSet, plan: &SubsetPlan) -> Result<CsaProjection> {
    let basis = Arc::new(InstrumentBasis::new(ds)?);
    CsaProjection::build(&basis, plan, ProjectionOptions::default())
}

/// `P A`.
pub fn apply(proj: &CsaProjection, a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    proj.apply(a)
}
