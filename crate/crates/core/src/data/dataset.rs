use rand::seq::SliceRandom;
use rand::Rng;

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Labelled samples. `inputs` is `N × prod(input_shape)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    pub inputs: Tensor<T>,
    pub labels: Vec<usize>,
    pub classes: usize,
    /// `[D]` for vectors, `[channels, height, width]` for images.
    pub input_shape: Vec<usize>,
}

/// Disjoint train / validation partition of one dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Splits<T> {
    pub train: Dataset<T>,
    pub val: Dataset<T>,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(inputs: Tensor<T>, labels: Vec<usize>, classes: usize, input_shape: Vec<usize>) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::shape(
                "dataset",
                format!("{} input rows, {} labels", inputs.rows(), labels.len()),
            ));
        }
        if inputs.cols() != input_shape.iter().product::<usize>() {
            return Err(Error::shape(
                "dataset",
                format!("row width {} vs input shape {:?}", inputs.cols(), input_shape),
            ));
        }
        if classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {classes}")));
        }
        if let Some(&bad) = labels.iter().find(|&&c| c >= classes) {
            return Err(Error::Config(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Self {
            inputs,
            labels,
            classes,
            input_shape,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let d = self.dim();
        let data = indices
            .iter()
            .flat_map(|&i| self.inputs.row(i).iter().copied())
            .collect();
        Self {
            inputs: Tensor::matrix(indices.len(), d, data).expect("subset shape"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            input_shape: self.input_shape.clone(),
        }
    }

    pub fn rows(&self, indices: &[usize]) -> Tensor<T> {
        self.subset(indices).inputs
    }

    /// Seeded stratified holdout: about `fraction` of each class goes to
    /// validation (at least one sample per class when `fraction > 0` and the
    /// class has two or more samples).
    pub fn split_holdout<R: Rng>(&self, fraction: f64, rng: &mut R) -> Result<Splits<T>> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::Config(format!("validation fraction {fraction} not in [0, 1)")));
        }
        let mut train = Vec::new();
        let mut val = Vec::new();
        for c in 0..self.classes {
            let mut members: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == c).collect();
            members.shuffle(rng);
            let mut n_val = (members.len() as f64 * fraction).round() as usize;
            if fraction > 0.0 && n_val == 0 && members.len() >= 2 {
                n_val = 1;
            }
            val.extend_from_slice(&members[..n_val]);
            train.extend_from_slice(&members[n_val..]);
        }
        train.sort_unstable();
        val.sort_unstable();
        Ok(Splits {
            train: self.subset(&train),
            val: self.subset(&val),
        })
    }

    /// Per-dimension mean and standard deviation (zero deviations become 1).
    pub fn moments(&self) -> (Vec<T>, Vec<T>) {
        let (n, d) = (T::from_usize_lossy(self.len().max(1)), self.dim());
        let mut mean = vec![T::zero(); d];
        for i in 0..self.len() {
            for (m, &x) in mean.iter_mut().zip(self.inputs.row(i)) {
                *m = *m + x;
            }
        }
        mean.iter_mut().for_each(|m| *m = *m / n);
        let mut var = vec![T::zero(); d];
        for i in 0..self.len() {
            for ((v, &x), &m) in var.iter_mut().zip(self.inputs.row(i)).zip(&mean) {
                *v = *v + (x - m) * (x - m);
            }
        }
        let std = var
            .into_iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s > T::zero() {
                    s
                } else {
                    T::one()
                }
            })
            .collect();
        (mean, std)
    }

    pub fn standardize_with(&mut self, mean: &[T], std: &[T]) {
        for i in 0..self.len() {
            for ((x, &m), &s) in self.inputs.row_mut(i).iter_mut().zip(mean).zip(std) {
                *x = (*x - m) / s;
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> Dataset<U> {
        Dataset {
            inputs: Tensor::new(
                self.inputs.shape().to_vec(),
                self.inputs.data().iter().map(|x| U::lit(x.as_f64())).collect(),
            )
            .expect("same shape"),
            labels: self.labels.clone(),
            classes: self.classes,
            input_shape: self.input_shape.clone(),
        }
    }
}

impl<T: Scalar> Splits<T> {
    /// Standardizes both splits with moments of the training split.
    pub fn standardize(&mut self) {
        let (mean, std) = self.train.moments();
        self.train.standardize_with(&mean, &std);
        self.val.standardize_with(&mean, &std);
    }
}
