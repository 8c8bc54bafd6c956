//! Random fixtures for unit tests.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dataset::DataSet;

pub fn random_matrix(n: usize, m: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(n, m, |_, _| StandardNormal.sample(&mut rng))
}

/// Correlated instruments, endogenous regressors driven by them, and an
/// outcome with error correlated with the first-stage noise. Exogenous
/// regressors start with a constant column.
pub fn random_dataset(n: usize, d1: usize, d2: usize, k: usize, seed: u64) -> DataSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || -> f64 { StandardNormal.sample(&mut rng) };
    let common: Vec<f64> = (0..n).map(|_| draw()).collect();
    let z = DMatrix::from_fn(n, k, |i, _| 0.6 * common[i] + draw());
    let exog = DMatrix::from_fn(n, d2, |_, j| if j == 0 { 1.0 } else { draw() });
    let eps: Vec<f64> = (0..n).map(|_| draw()).collect();
    let mut endog = DMatrix::zeros(n, d1);
    for i in 0..n {
        for e in 0..d1 {
            let signal: f64 = (0..k)
                .map(|j| z[(i, j)] * (0.5 / (1.0 + j as f64 + e as f64)))
                .sum();
            endog[(i, e)] = signal + 0.5 * eps[i] + draw();
        }
    }
    let y = DVector::from_fn(n, |i, _| {
        let mut v = eps[i];
        for e in 0..d1 {
            v += 0.3 * endog[(i, e)];
        }
        for j in 0..d2 {
            v += 0.2 * exog[(i, j)];
        }
        v
    });
    DataSet::new(y, endog, exog, z).expect("valid random data set")
}
