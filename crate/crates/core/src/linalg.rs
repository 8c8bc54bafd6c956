//! Small dense helpers shared by the estimators.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative threshold below which a pivoted-QR diagonal marks a dependent column.
pub const RANK_TOL: f64 = 1e-10;

/// Condition number above which second-stage systems are reported.
pub const WARN_CONDITION: f64 = 1e10;

/// Condition number above which a system is treated as singular.
pub const MAX_CONDITION: f64 = 1e14;

/// 2-norm condition number from the singular values.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 1.0;
    }
    let sv = m.clone().singular_values();
    let max = sv.max();
    let min = sv.min();
    if min <= 0.0 || !min.is_finite() {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Inverse of a small square matrix, refusing numerically singular input.
pub fn checked_inverse(m: &DMatrix<f64>, what: &str, max_cond: f64) -> Result<DMatrix<f64>> {
    let cond = condition_number(m);
    if !cond.is_finite() {
        return Err(Error::Singular(what.to_string()));
    }
    if cond > max_cond {
        return Err(Error::IllConditioned {
            what: what.to_string(),
            cond,
        });
    }
    if cond > WARN_CONDITION {
        log::warn!("{what} has condition number {cond:.3e}");
    }
    m.clone()
        .full_piv_lu()
        .try_inverse()
        .ok_or_else(|| Error::Singular(what.to_string()))
}

/// Orthonormal basis of the column space of `m`, failing on rank deficiency.
pub fn orthonormal_basis(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (n, p) = m.shape();
    if p == 0 {
        return Ok(DMatrix::zeros(n, 0));
    }
    if p > n {
        return Err(Error::Singular(format!("{n}x{p} design")));
    }
    let qr = m.clone().col_piv_qr();
    let r = qr.r();
    let largest = (0..p).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
    if largest == 0.0 || (0..p).any(|i| r[(i, i)].abs() < RANK_TOL * largest) {
        return Err(Error::Singular(format!("{n}x{p} design")));
    }
    Ok(qr.q())
}

/// `Z (Z'Z)^{-1} Z'` formed as `Q Q'` from a pivoted QR of `Z`.
pub fn dense_projector(z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let q = orthonormal_basis(z)?;
    Ok(&q * q.transpose())
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// `a' b` for column vectors.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Quadratic form `v' M v`.
pub fn quad(m: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
    v.dot(&(m * v))
}

/// Median of an unsorted slice (mean of the middle pair for even lengths).
pub fn median(values: &[f64]) -> f64 {
    quantile(values, 0.5)
}

/// Linear-interpolation (type 7) sample quantile.
pub fn quantile(values: &[f64], p: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let h = (v.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}
