use serde::{Deserialize, Serialize};

use super::cholesky::{cholesky_solve, cholesky_with_fixed_jitter, cholesky_with_jitter, solve_lower};
use super::kernel::{kernel_matrix, kernel_vector, KernelConfig};
use crate::diffcore::{CustomOp, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Negative variances down to this value are rounding noise and clamp to zero.
pub const VARIANCE_CLAMP: f64 = 1e-10;

/// Epoch-frozen GP over an anchor set: features, one-hot labels, and the
/// factor of `K(H_A, H_A) + σ²I`.
#[derive(Clone, Debug, PartialEq)]
pub struct GpSnapshot<T> {
    features: Tensor<T>,
    labels: Vec<usize>,
    classes: usize,
    one_hot: Tensor<T>,
    factor: Tensor<T>,
    /// `(K + σ²I)⁻¹ Y_A`, shape `|A| × C`.
    weights: Tensor<T>,
    config: KernelConfig,
    jitter: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Posterior<T> {
    /// Raw posterior mean over classes; not a distribution.
    pub mean: Vec<T>,
    /// Posterior variance, in `[0, 1]`.
    pub variance: T,
}

pub fn one_hot<T: Scalar>(labels: &[usize], classes: usize) -> Tensor<T> {
    let mut y = Tensor::zeros(vec![labels.len(), classes]);
    for (i, &c) in labels.iter().enumerate() {
        y.set(i, c, T::one());
    }
    y
}

impl<T: Scalar> GpSnapshot<T> {
    /// Builds the snapshot, searching the jitter schedule if needed.
    pub fn fit(
        features: Tensor<T>,
        labels: Vec<usize>,
        classes: usize,
        config: KernelConfig,
    ) -> Result<Self> {
        Self::build(features, labels, classes, config, None)
    }

    fn build(
        features: Tensor<T>,
        labels: Vec<usize>,
        classes: usize,
        config: KernelConfig,
        fixed_jitter: Option<f64>,
    ) -> Result<Self> {
        config.validate()?;
        if features.rows() != labels.len() || labels.is_empty() {
            return Err(Error::shape(
                "gp_snapshot",
                format!("features {:?} with {} labels", features.shape(), labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&c| c >= classes) {
            return Err(Error::Contract(format!(
                "anchor label {bad} out of range for {classes} classes"
            )));
        }
        let k = kernel_matrix(&features, &config)?;
        let factor = match fixed_jitter {
            None => cholesky_with_jitter(&k, config.noise_variance, &config)?,
            Some(j) => cholesky_with_fixed_jitter(&k, config.noise_variance, j)?,
        };
        let one_hot = one_hot(&labels, classes);
        let weights = cholesky_solve(&factor.lower, &one_hot);
        Ok(Self {
            features,
            labels,
            classes,
            one_hot,
            factor: factor.lower,
            weights,
            config,
            jitter: factor.jitter,
        })
    }

    pub fn anchor_count(&self) -> usize {
        self.labels.len()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn features(&self) -> &Tensor<T> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn one_hot_labels(&self) -> &Tensor<T> {
        &self.one_hot
    }

    pub fn factor(&self) -> &Tensor<T> {
        &self.factor
    }

    pub fn config(&self) -> &KernelConfig {
        &self.config
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    fn check_query(&self, h: &[T]) -> Result<()> {
        if h.len() != self.dim() {
            return Err(Error::shape(
                "gp_posterior",
                format!("query dim {} vs anchor dim {}", h.len(), self.dim()),
            ));
        }
        Ok(())
    }

    fn mean_from(&self, k: &[T]) -> Vec<T> {
        let mut mean = vec![T::zero(); self.classes];
        for (i, &ki) in k.iter().enumerate() {
            for (m, &w) in mean.iter_mut().zip(self.weights.row(i)) {
                *m = *m + ki * w;
            }
        }
        mean
    }

    /// Posterior mean `k_bᵀ(K+σ²I)⁻¹Y_A` and variance `1 − k_bᵀ(K+σ²I)⁻¹k_b`.
    pub fn posterior(&self, h: &[T]) -> Result<Posterior<T>> {
        self.check_query(h)?;
        let k = kernel_vector(&self.features, h, &self.config)?;
        let mean = self.mean_from(&k);
        let kcol = Tensor::new(vec![k.len(), 1], k).expect("column");
        let v = solve_lower(&self.factor, &kcol);
        let quad = v.data().iter().fold(T::zero(), |acc, &x| acc + x * x);
        let mut variance = T::one() - quad;
        if variance < T::zero() {
            if variance >= T::lit(-VARIANCE_CLAMP) {
                variance = T::zero();
            } else {
                return Err(Error::domain(
                    "gp_posterior",
                    format!("posterior variance {variance:e} below rounding tolerance"),
                ));
            }
        }
        Ok(Posterior { mean, variance })
    }

    /// Jacobian `∂g_m/∂h_b` as a `d × C` matrix. Anchor features and the
    /// factor are constants.
    pub fn posterior_mean_grad(&self, h: &[T]) -> Result<Tensor<T>> {
        self.check_query(h)?;
        let k = kernel_vector(&self.features, h, &self.config)?;
        let inv_l2 = T::one() / (T::lit(self.config.length_scale) * T::lit(self.config.length_scale));
        let (d, c) = (self.dim(), self.classes);
        let mut jac = Tensor::zeros(vec![d, c]);
        for (i, &ki) in k.iter().enumerate() {
            let anchor = self.features.row(i);
            let w = self.weights.row(i);
            for j in 0..d {
                let dk = ki * (anchor[j] - h[j]) * inv_l2;
                for (dst, &wc) in jac.row_mut(j).iter_mut().zip(w) {
                    *dst = *dst + dk * wc;
                }
            }
        }
        Ok(jac)
    }

    pub fn to_dump(&self) -> SnapshotDump {
        SnapshotDump {
            config: self.config,
            jitter: self.jitter,
            anchors: self.anchor_count(),
            dim: self.dim(),
            classes: self.classes,
            features: self.features.data().iter().map(|x| x.as_f64()).collect(),
            labels: self.labels.clone(),
        }
    }

    /// Restores a snapshot, reusing the recorded jitter.
    pub fn from_dump(dump: &SnapshotDump) -> Result<Self> {
        let data = dump.features.iter().map(|&x| T::lit(x)).collect();
        let features = Tensor::matrix(dump.anchors, dump.dim, data)?;
        Self::build(
            features,
            dump.labels.clone(),
            dump.classes,
            dump.config,
            Some(dump.jitter),
        )
    }
}

/// Serializable form of a [`GpSnapshot`]. Values are stored widened to `f64`,
/// which is exact for both scalar types.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotDump {
    pub config: KernelConfig,
    pub jitter: f64,
    pub anchors: usize,
    pub dim: usize,
    pub classes: usize,
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
}

struct PosteriorMeanOp<T> {
    jacobians: Vec<Tensor<T>>,
}

impl<T: Scalar> CustomOp<T> for PosteriorMeanOp<T> {
    fn name(&self) -> &'static str {
        "gp_posterior_mean"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let h = inputs[0];
        let mut dh = Tensor::zeros(h.shape().to_vec());
        for (b, jac) in self.jacobians.iter().enumerate() {
            let g = grad.row(b);
            for (j, dst) in dh.row_mut(b).iter_mut().enumerate() {
                *dst = jac.row(j).iter().zip(g).fold(T::zero(), |acc, (&a, &x)| acc + a * x);
            }
        }
        Ok(vec![Some(dh)])
    }
}

/// Records the per-row GP posterior mean of `h` (`B × d`) on the tape, with
/// row `b` answered by `snapshots[b]`. Returns the `B × C` mean node and the
/// full posteriors. Gradients reach `h` only.
pub fn record_posterior_mean<T: Scalar>(
    tape: &mut Tape<T>,
    h: Var,
    snapshots: &[&GpSnapshot<T>],
) -> Result<(Var, Vec<Posterior<T>>)> {
    let hv = tape.value(h).clone();
    if hv.rows() != snapshots.len() {
        return Err(Error::shape(
            "gp_posterior_mean",
            format!("{} rows, {} snapshots", hv.rows(), snapshots.len()),
        ));
    }
    let classes = snapshots.first().map_or(0, |s| s.classes());
    if snapshots.iter().any(|s| s.classes() != classes) {
        return Err(Error::Contract("snapshots disagree on class count".into()));
    }
    let mut posteriors = Vec::with_capacity(hv.rows());
    let mut jacobians = Vec::with_capacity(hv.rows());
    let mut data = Vec::with_capacity(hv.rows() * classes);
    for (b, snap) in snapshots.iter().enumerate() {
        let post = snap.posterior(hv.row(b))?;
        data.extend_from_slice(&post.mean);
        jacobians.push(snap.posterior_mean_grad(hv.row(b))?);
        posteriors.push(post);
    }
    let value = Tensor::matrix(hv.rows(), classes, data)?;
    let node = tape.custom(Box::new(PosteriorMeanOp { jacobians }), &[h], value);
    Ok((node, posteriors))
}
