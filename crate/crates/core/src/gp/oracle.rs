//! Dense-inversion reference for the GP posterior, independent of the
//! Cholesky path: the Gram matrix is rebuilt with a direct double loop and
//! inverted by LU.

use nalgebra::{DMatrix, DVector};

use super::kernel::KernelConfig;

pub struct DensePosterior {
    pub mean: Vec<f64>,
    pub variance: f64,
}

/// Posterior mean and variance via `(K + (σ² + jitter)I)⁻¹`; `None` if singular.
pub fn dense_posterior(
    features: &[Vec<f64>],
    labels: &[usize],
    classes: usize,
    config: &KernelConfig,
    jitter: f64,
    query: &[f64],
) -> Option<DensePosterior> {
    let n = features.len();
    let two_l2 = 2.0 * config.length_scale * config.length_scale;
    let k = |a: &[f64], b: &[f64]| {
        let r2: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
        (-r2 / two_l2).exp()
    };
    let mut gram = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            gram[(i, j)] = k(&features[i], &features[j]);
        }
        gram[(i, i)] += config.noise_variance + jitter;
    }
    let inv = gram.try_inverse()?;
    let kb = DVector::from_iterator(n, features.iter().map(|a| k(a, query)));
    let mut y = DMatrix::<f64>::zeros(n, classes);
    for (i, &c) in labels.iter().enumerate() {
        y[(i, c)] = 1.0;
    }
    let proj = kb.transpose() * &inv;
    let mean = (&proj * y).iter().copied().collect();
    let variance = 1.0 - (proj * kb)[(0, 0)];
    Some(DensePosterior { mean, variance })
}

/// 2-norm condition number of `K + σ²I`, from its eigenvalues.
pub fn gram_condition(features: &[Vec<f64>], config: &KernelConfig) -> f64 {
    let n = features.len();
    let two_l2 = 2.0 * config.length_scale * config.length_scale;
    let gram = DMatrix::from_fn(n, n, |i, j| {
        let r2: f64 = features[i].iter().zip(&features[j]).map(|(x, y)| (x - y).powi(2)).sum();
        (-r2 / two_l2).exp() + if i == j { config.noise_variance } else { 0.0 }
    });
    let eig = gram.symmetric_eigenvalues();
    let lo = eig.min();
    if lo <= 0.0 {
        f64::INFINITY
    } else {
        eig.max() / lo
    }
}
