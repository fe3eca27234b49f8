use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// RBF length-scale the reference profiles use for 10-class image data.
pub const REFERENCE_LENGTH_SCALE_10_CLASS: f64 = 200.0;
/// RBF length-scale the reference profiles use for 100/200-class image data.
pub const REFERENCE_LENGTH_SCALE_MANY_CLASS: f64 = 70.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    pub length_scale: f64,
    pub noise_variance: f64,
    pub jitter_start: f64,
    pub jitter_max: f64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            length_scale: 1.0,
            noise_variance: 0.01,
            jitter_start: 1e-10,
            jitter_max: 1e-4,
        }
    }
}

impl KernelConfig {
    pub fn with_length_scale(mut self, l: f64) -> Self {
        self.length_scale = l;
        self
    }

    pub fn with_noise(mut self, noise_variance: f64) -> Self {
        self.noise_variance = noise_variance;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.length_scale > 0.0 && self.length_scale.is_finite()) {
            return Err(Error::Config(format!(
                "length_scale must be positive, got {}",
                self.length_scale
            )));
        }
        if !(self.noise_variance >= 0.0 && self.noise_variance.is_finite()) {
            return Err(Error::Config(format!(
                "noise_variance must be non-negative, got {}",
                self.noise_variance
            )));
        }
        if !(self.jitter_start > 0.0 && self.jitter_start <= self.jitter_max) {
            return Err(Error::Config(format!(
                "jitter schedule requires 0 < jitter_start <= jitter_max, got {} and {}",
                self.jitter_start, self.jitter_max
            )));
        }
        Ok(())
    }

    /// `1 / (2 l²)` in the working precision.
    pub(crate) fn inv_two_l2<T: Scalar>(&self) -> T {
        T::one() / (T::lit(2.0) * T::lit(self.length_scale) * T::lit(self.length_scale))
    }
}

pub fn squared_distance<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y) * (x - y))
        .fold(T::zero(), |acc, v| acc + v)
}

/// `exp(-‖a − b‖² / (2 l²))`.
pub fn rbf_kernel<T: Scalar>(a: &[T], b: &[T], config: &KernelConfig) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::shape(
            "rbf_kernel",
            format!("dimensions {} and {}", a.len(), b.len()),
        ));
    }
    Ok((-squared_distance(a, b) * config.inv_two_l2::<T>()).exp())
}

/// Symmetric `N × N` Gram matrix over the rows of `h`.
pub fn kernel_matrix<T: Scalar>(h: &Tensor<T>, config: &KernelConfig) -> Result<Tensor<T>> {
    let n = h.rows();
    if n == 0 {
        return Err(Error::shape("kernel_matrix", "no rows"));
    }
    let scale = config.inv_two_l2::<T>();
    let mut k = Tensor::zeros(vec![n, n]);
    for i in 0..n {
        k.set(i, i, T::one());
        for j in 0..i {
            let v = (-squared_distance(h.row(i), h.row(j)) * scale).exp();
            k.set(i, j, v);
            k.set(j, i, v);
        }
    }
    Ok(k)
}

/// Covariances between `query` and every row of `h`.
pub fn kernel_vector<T: Scalar>(h: &Tensor<T>, query: &[T], config: &KernelConfig) -> Result<Vec<T>> {
    if h.cols() != query.len() {
        return Err(Error::shape(
            "kernel_vector",
            format!("anchors {:?}, query dim {}", h.shape(), query.len()),
        ));
    }
    let scale = config.inv_two_l2::<T>();
    Ok((0..h.rows())
        .map(|i| (-squared_distance(h.row(i), query) * scale).exp())
        .collect())
}
