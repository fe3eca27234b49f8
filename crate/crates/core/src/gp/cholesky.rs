use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::kernel::KernelConfig;

/// Lower-triangular factor of `K + (σ² + jitter)·I`.
#[derive(Clone, Debug, PartialEq)]
pub struct CholeskyFactor<T> {
    pub lower: Tensor<T>,
    /// Diagonal jitter that was needed on top of the noise; zero if none.
    pub jitter: f64,
}

/// Plain Cholesky; `None` if a pivot is not strictly positive.
pub fn cholesky<T: Scalar>(a: &Tensor<T>) -> Option<Tensor<T>> {
    let n = a.rows();
    let mut l = Tensor::zeros(vec![n, n]);
    for j in 0..n {
        let mut diag = a.get(j, j);
        for k in 0..j {
            diag = diag - l.get(j, k) * l.get(j, k);
        }
        if !(diag > T::zero()) || !diag.is_finite() {
            return None;
        }
        let ljj = diag.sqrt();
        l.set(j, j, ljj);
        for i in j + 1..n {
            let mut s = a.get(i, j);
            for k in 0..j {
                s = s - l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, s / ljj);
        }
    }
    Some(l)
}

fn with_diagonal<T: Scalar>(k: &Tensor<T>, add: T) -> Tensor<T> {
    let mut a = k.clone();
    for i in 0..a.rows() {
        a.set(i, i, a.get(i, i) + add);
    }
    a
}

/// Factors `K + σ²I`, adding jitter `jitter_start, 10·jitter_start, …` up to
/// `jitter_max` only when the unjittered factorization fails.
pub fn cholesky_with_jitter<T: Scalar>(
    k: &Tensor<T>,
    noise_variance: f64,
    config: &KernelConfig,
) -> Result<CholeskyFactor<T>> {
    let n = k.rows();
    if k.cols() != n {
        return Err(Error::shape("cholesky_with_jitter", format!("{:?}", k.shape())));
    }
    let noise = T::lit(noise_variance);
    if let Some(lower) = cholesky(&with_diagonal(k, noise)) {
        return Ok(CholeskyFactor { lower, jitter: 0.0 });
    }
    let mut jitter = config.jitter_start;
    while jitter <= config.jitter_max * (1.0 + 1e-9) {
        if let Some(lower) = cholesky(&with_diagonal(k, noise + T::lit(jitter))) {
            log::debug!("cholesky needed jitter {jitter:e} for order {n}");
            return Ok(CholeskyFactor { lower, jitter });
        }
        jitter *= 10.0;
    }
    Err(Error::NotPositiveDefinite {
        n,
        jitter_max: config.jitter_max,
    })
}

/// Factors with a known jitter, no search. Used when restoring a dump.
pub fn cholesky_with_fixed_jitter<T: Scalar>(
    k: &Tensor<T>,
    noise_variance: f64,
    jitter: f64,
) -> Result<CholeskyFactor<T>> {
    let add = T::lit(noise_variance) + if jitter > 0.0 { T::lit(jitter) } else { T::zero() };
    cholesky(&with_diagonal(k, add))
        .map(|lower| CholeskyFactor { lower, jitter })
        .ok_or(Error::NotPositiveDefinite {
            n: k.rows(),
            jitter_max: jitter,
        })
}

/// Solves `L X = B` for lower-triangular `L`; `B` is `n × m`.
pub fn solve_lower<T: Scalar>(l: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (n, m) = (l.rows(), b.cols());
    let mut x = b.clone();
    for c in 0..m {
        for i in 0..n {
            let mut s = x.get(i, c);
            for k in 0..i {
                s = s - l.get(i, k) * x.get(k, c);
            }
            x.set(i, c, s / l.get(i, i));
        }
    }
    x
}

/// Solves `Lᵀ X = B` for lower-triangular `L`.
pub fn solve_upper_transposed<T: Scalar>(l: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (n, m) = (l.rows(), b.cols());
    let mut x = b.clone();
    for c in 0..m {
        for i in (0..n).rev() {
            let mut s = x.get(i, c);
            for k in i + 1..n {
                s = s - l.get(k, i) * x.get(k, c);
            }
            x.set(i, c, s / l.get(i, i));
        }
    }
    x
}

/// Solves `(L Lᵀ) X = B`.
pub fn cholesky_solve<T: Scalar>(l: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    solve_upper_transposed(l, &solve_lower(l, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::kernel::kernel_matrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn reconstruct(l: &Tensor<f64>) -> Tensor<f64> {
        l.matmul(&l.transpose()).unwrap()
    }

    #[test]
    fn identity_needs_no_jitter() {
        let f = cholesky_with_jitter(&Tensor::<f64>::identity(3), 0.0, &KernelConfig::default()).unwrap();
        assert_eq!(f.lower, Tensor::identity(3));
        assert_eq!(f.jitter, 0.0);
    }

    #[test]
    fn duplicate_anchors_with_noise() {
        let k = Tensor::full(vec![2, 2], 1.0);
        let f = cholesky_with_jitter(&k, 0.01, &KernelConfig::default()).unwrap();
        let target = [1.01, 1.0, 1.0, 1.01];
        for (x, t) in reconstruct(&f.lower).data().iter().zip(target) {
            assert!(((x - t) / t).abs() < 1e-10);
        }
    }

    #[test]
    fn duplicate_anchors_without_noise_get_jitter() {
        let k = Tensor::full(vec![2, 2], 1.0);
        let f = cholesky_with_jitter(&k, 0.0, &KernelConfig::default()).unwrap();
        assert!(f.jitter >= 1e-10 && f.jitter <= 1e-4);
    }

    #[test]
    fn hopeless_matrix_reports_order_and_cap() {
        let k = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, -1.0]).unwrap();
        match cholesky_with_jitter(&k, 0.0, &KernelConfig::default()) {
            Err(Error::NotPositiveDefinite { n, jitter_max }) => {
                assert_eq!(n, 2);
                assert_eq!(jitter_max, 1e-4);
            }
            other => panic!("expected failure, got {other:?}"),
        }
    }

    #[test]
    fn solve_matches_dense_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let cfg = KernelConfig::default();
        let h = Tensor::matrix(10, 3, (0..30).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let k = kernel_matrix(&h, &cfg).unwrap();
        let f = cholesky_with_jitter(&k, 0.01, &cfg).unwrap();
        let b = Tensor::matrix(10, 1, (0..10).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let x = cholesky_solve(&f.lower, &b);

        let mut a = nalgebra::DMatrix::from_row_slice(10, 10, k.data());
        for i in 0..10 {
            a[(i, i)] += 0.01 + f.jitter;
        }
        let inv = a.try_inverse().unwrap();
        let expected = inv * nalgebra::DVector::from_column_slice(b.data());
        for i in 0..10 {
            assert!((x.data()[i] - expected[i]).abs() < 1e-8);
        }
    }
}
