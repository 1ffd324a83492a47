//! Shared helpers for the integration suites: central finite differences
//! and seeded random tensors.

#![allow(dead_code)]

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fadi_core::nethead::Matrix;

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, random_vec(rng, rows * cols)).unwrap()
}

/// Relative error with an absolute floor, the usual gradient-check metric.
pub fn rel_err(numeric: f64, analytic: f64) -> f64 {
    (numeric - analytic).abs() / (numeric.abs() + analytic.abs()).max(1e-8)
}

/// Checks one analytic gradient vector against central finite differences
/// of `loss_at`, which evaluates the loss with coordinate `i` of the
/// underlying parameter temporarily set to the given value.
pub fn check_gradient(
    label: &str,
    params: &[f64],
    analytic: &[f64],
    tol: f64,
    mut loss_at: impl FnMut(usize, f64) -> f64,
) {
    assert_eq!(params.len(), analytic.len(), "{label}: gradient length");
    for i in 0..params.len() {
        let plus = loss_at(i, params[i] + FD_STEP);
        let minus = loss_at(i, params[i] - FD_STEP);
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        if (numeric - analytic[i]).abs() < 1e-9 {
            // both vanish; the central difference has no signal left here
            continue;
        }
        let err = rel_err(numeric, analytic[i]);
        assert!(
            err < tol,
            "{label}[{i}]: numeric={numeric:.10e} analytic={:.10e} rel_err={err:.3e}",
            analytic[i]
        );
    }
}
