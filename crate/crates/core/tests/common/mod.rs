#![allow(dead_code)]

use csa2sls::DataSet;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_matrix(rng: &mut ChaCha8Rng, n: usize, m: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, m, |_, _| StandardNormal.sample(rng))
}

/// Instruments with a common factor, endogenous regressors driven by the
/// instruments and by an error shared with the outcome. The first exogenous
/// column is a constant.
pub fn dataset(rng: &mut ChaCha8Rng, n: usize, d1: usize, d2: usize, k: usize) -> DataSet {
    let common = normal_matrix(rng, n, 1);
    let z = normal_matrix(rng, n, k) + &common * DMatrix::from_element(1, k, 0.7);
    let mut exog = normal_matrix(rng, n, d2);
    if d2 > 0 {
        exog.column_mut(0).fill(1.0);
    }
    let eps = normal_matrix(rng, n, 1);
    let pi = normal_matrix(rng, k, d1) * 0.4;
    let endog = &z * pi + &eps * DMatrix::from_element(1, d1, 0.6) + normal_matrix(rng, n, d1);
    let beta: Vec<f64> = (0..d1 + d2).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut y = eps.column(0).into_owned();
    for (j, b) in beta[..d1].iter().enumerate() {
        y += endog.column(j) * *b;
    }
    for (j, b) in beta[d1..].iter().enumerate() {
        y += exog.column(j) * *b;
    }
    DataSet::new(y, endog, exog, z).expect("valid data set")
}

/// Every size-`k` subset of `0..total`, lexicographic.
pub fn combinations(total: usize, k: usize) -> Vec<Vec<usize>> {
    fn go(start: usize, total: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for j in start..total {
            cur.push(j);
            go(j + 1, total, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    go(0, total, k, &mut Vec::new(), &mut out);
    out
}

/// `Z (Z'Z)^{-1} Z'` by explicit inversion.
pub fn projector(z: &DMatrix<f64>) -> DMatrix<f64> {
    let inv = (z.transpose() * z).try_inverse().expect("full rank design");
    z * inv * z.transpose()
}

/// `[Z_S, X_exog]`.
pub fn design(ds: &DataSet, subset: &[usize]) -> DMatrix<f64> {
    let n = ds.n();
    let mut z = DMatrix::zeros(n, subset.len() + ds.d2());
    for (c, &j) in subset.iter().enumerate() {
        z.set_column(c, &ds.instruments().column(j));
    }
    for j in 0..ds.d2() {
        z.set_column(subset.len() + j, &ds.exogenous().column(j));
    }
    z
}

/// Equal-weight average of the subset projectors.
pub fn average_projector(ds: &DataSet, k: usize) -> DMatrix<f64> {
    let subsets = combinations(ds.instrument_count(), k);
    let mut p = DMatrix::zeros(ds.n(), ds.n());
    for s in &subsets {
        p += projector(&design(ds, s));
    }
    p / subsets.len() as f64
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

pub fn max_rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax() / b.amax().max(1.0)
}

pub fn vec_rel_err(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).amax() / b.amax().max(1.0)
}
