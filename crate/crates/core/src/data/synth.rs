//! Seeded synthetic datasets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobsSpec {
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    /// Minimum pairwise distance between class means.
    pub separation: f64,
    /// Isotropic standard deviation of points around their class mean.
    pub noise: f64,
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Seeded random orthonormal basis (Gram–Schmidt on Gaussian vectors).
fn random_rotation(dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while basis.len() < dim {
        let mut v: Vec<f64> = (0..dim).map(|_| gaussian(rng)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    basis
}

/// Class means at pairwise distance ≥ `separation`: the scaled signed axes
/// `±(s/√2)·e_i` (cross-polytope) under a random rotation, falling back to
/// rejection sampling when `C > 2·dim`.
pub fn class_means(classes: usize, dim: usize, separation: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    if classes <= 2 * dim {
        let rot = random_rotation(dim, rng);
        let r = separation / std::f64::consts::SQRT_2;
        return (0..classes)
            .map(|c| {
                let (axis, sign) = (c % dim, if c < dim { 1.0 } else { -1.0 });
                (0..dim).map(|j| sign * r * rot[axis][j]).collect()
            })
            .collect();
    }
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(classes);
    let mut box_half = separation * (classes as f64).powf(1.0 / dim as f64);
    let mut attempts = 0usize;
    while means.len() < classes {
        let cand: Vec<f64> = (0..dim).map(|_| rng.random_range(-box_half..box_half)).collect();
        let ok = means.iter().all(|m| {
            m.iter().zip(&cand).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() >= separation
        });
        if ok {
            means.push(cand);
        }
        attempts += 1;
        if attempts % 10_000 == 0 {
            box_half *= 1.5;
        }
    }
    means
}

pub fn gen_blobs(spec: &BlobsSpec, seed: u64) -> Result<Dataset<f64>> {
    if !(spec.separation > 0.0) || spec.per_class == 0 || spec.dim == 0 || spec.noise < 0.0 {
        return Err(Error::Config(format!("invalid blobs spec {spec:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means = class_means(spec.classes, spec.dim, spec.separation, &mut rng);
    let mut data = Vec::with_capacity(spec.classes * spec.per_class * spec.dim);
    let mut labels = Vec::with_capacity(spec.classes * spec.per_class);
    // interleave classes so that prefixes stay balanced
    for _ in 0..spec.per_class {
        for (c, mean) in means.iter().enumerate() {
            for &m in mean {
                data.push(m + spec.noise * gaussian(&mut rng));
            }
            labels.push(c);
        }
    }
    let n = labels.len();
    Dataset::new(Tensor::matrix(n, spec.dim, data)?, labels, spec.classes, vec![spec.dim])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpiralSpec {
    pub classes: usize,
    pub per_class: usize,
    pub noise: f64,
    /// Number of half-turns each arm sweeps.
    pub turns: f64,
}

/// Point on arm `class` at parameter `t ∈ [0, 1]`, before noise.
pub fn spiral_point(class: usize, classes: usize, turns: f64, t: f64) -> [f64; 2] {
    let radius = 0.1 + t;
    let theta = t * turns * std::f64::consts::PI + 2.0 * std::f64::consts::PI * class as f64 / classes as f64;
    [radius * theta.cos(), radius * theta.sin()]
}

/// Interleaved spiral arms in the plane, one per class.
pub fn gen_interleaved(spec: &SpiralSpec, seed: u64) -> Result<Dataset<f64>> {
    if !(2..=3).contains(&spec.classes) || spec.per_class == 0 || spec.noise < 0.0 {
        return Err(Error::Config(format!("invalid spiral spec {spec:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(spec.classes * spec.per_class * 2);
    let mut labels = Vec::new();
    for i in 0..spec.per_class {
        for c in 0..spec.classes {
            let t = if spec.per_class == 1 {
                0.5
            } else {
                i as f64 / (spec.per_class - 1) as f64
            };
            let p = spiral_point(c, spec.classes, spec.turns, t);
            data.push(p[0] + spec.noise * gaussian(&mut rng));
            data.push(p[1] + spec.noise * gaussian(&mut rng));
            labels.push(c);
        }
    }
    let n = labels.len();
    Dataset::new(Tensor::matrix(n, 2, data)?, labels, spec.classes, vec![2])
}
