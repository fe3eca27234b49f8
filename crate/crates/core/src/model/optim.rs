use serde::{Deserialize, Serialize};

use crate::diffcore::{GradientMap, ParamId, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    /// Step drops as `(epoch fraction, rate)`, fractions ascending from 0.
    pub schedule: Vec<(f64, f64)>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            schedule: vec![(0.0, 0.1), (0.6, 0.01), (0.8, 0.001)],
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 64,
            epochs: 50,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        match self.schedule.first() {
            Some(&(f, _)) if f == 0.0 => {}
            _ => return bad("learning-rate schedule must start at fraction 0".into()),
        }
        for pair in self.schedule.windows(2) {
            if !(pair[1].0 > pair[0].0) {
                return bad(format!("schedule fractions must increase: {:?}", self.schedule));
            }
        }
        if let Some(&(f, r)) = self.schedule.iter().find(|&&(f, r)| !(f < 1.0) || !(r > 0.0)) {
            return bad(format!("schedule entry ({f}, {r}) needs fraction < 1 and rate > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} not in [0, 1)", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight decay {} is negative", self.weight_decay));
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        Ok(())
    }

    /// Rate in force during `epoch` (0-based) of `epochs`.
    pub fn rate_at(&self, epoch: usize, epochs: usize) -> f64 {
        let progress = epoch as f64 / epochs.max(1) as f64;
        self.schedule
            .iter()
            .take_while(|&&(f, _)| f <= progress)
            .last()
            .map_or(self.schedule[0].1, |&(_, r)| r)
    }

    /// Same schedule with every rate multiplied by `factor`.
    pub fn with_rate_scale(&self, factor: f64) -> Self {
        Self {
            schedule: self.schedule.iter().map(|&(f, r)| (f, r * factor)).collect(),
            ..self.clone()
        }
    }
}

/// `v ← m·v + g + λ·p; p ← p − η·v`, parameter by parameter.
pub fn sgd_momentum_step<T: Scalar>(
    params: &mut [Tensor<T>],
    grads: &[&Tensor<T>],
    velocity: &mut [Tensor<T>],
    lr: T,
    momentum: T,
    weight_decay: T,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::shape(
            "sgd_momentum_step",
            format!("{} params, {} grads, {} velocities", params.len(), grads.len(), velocity.len()),
        ));
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(Error::shape(
                "sgd_momentum_step",
                format!("param {:?}, grad {:?}, velocity {:?}", p.shape(), g.shape(), v.shape()),
            ));
        }
        for ((pi, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vi = momentum * *vi + gi + weight_decay * *pi;
            *pi = *pi - lr * *vi;
        }
    }
    Ok(())
}

/// SGD with momentum and L2 weight decay, holding the velocity buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdMomentum<T> {
    momentum: T,
    weight_decay: T,
    velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> SgdMomentum<T> {
    pub fn new(params: &[Tensor<T>], momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum: T::lit(momentum),
            weight_decay: T::lit(weight_decay),
            velocity: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
        }
    }

    pub fn velocity(&self) -> &[Tensor<T>] {
        &self.velocity
    }

    /// Parameters absent from `grads` get a zero gradient (decay still applies).
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &GradientMap<T>, lr: f64) -> Result<()> {
        let zeros: Vec<Tensor<T>> = (0..params.len())
            .filter(|&i| grads.get(ParamId(i)).is_none())
            .map(|i| Tensor::zeros(params[i].shape().to_vec()))
            .collect();
        let mut spare = zeros.iter();
        let g: Vec<&Tensor<T>> = (0..params.len())
            .map(|i| grads.get(ParamId(i)).unwrap_or_else(|| spare.next().expect("one zero per missing grad")))
            .collect();
        sgd_momentum_step(params, &g, &mut self.velocity, T::lit(lr), self.momentum, self.weight_decay)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::row_vector(v.to_vec())
    }

    fn run(steps: usize, p0: &[f64], g: &[f64], lr: f64, m: f64, wd: f64) -> Vec<f64> {
        let mut params = vec![t(p0)];
        let grad = t(g);
        let mut vel = vec![Tensor::zeros(vec![1, p0.len()])];
        for _ in 0..steps {
            sgd_momentum_step(&mut params, &[&grad], &mut vel, lr, m, wd).unwrap();
        }
        params[0].data().to_vec()
    }

    #[test]
    fn plain_step_without_momentum_or_decay() {
        assert_eq!(run(1, &[1.0, -2.0], &[0.5, 0.25], 0.1, 0.0, 0.0), vec![1.0 - 0.05, -2.0 - 0.025]);
    }

    #[test]
    fn two_momentum_steps_displace_by_two_plus_m() {
        let (lr, m, g) = (0.1, 0.9, 0.5);
        let p = run(2, &[0.0], &[g], lr, m, 0.0);
        // step 1: v = g; step 2: v = m·g + g
        let expected = -lr * g * (2.0 + m);
        assert!((p[0] - expected).abs() < 1e-15, "{} vs {expected}", p[0]);
    }

    #[test]
    fn decay_alone_scales_parameters() {
        let (lr, wd) = (0.1, 1e-2);
        let p = run(1, &[3.0, -1.5], &[0.0, 0.0], lr, 0.0, wd);
        assert!((p[0] - 3.0 * (1.0 - lr * wd)).abs() < 1e-15);
        assert!((p[1] + 1.5 * (1.0 - lr * wd)).abs() < 1e-15);
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let mut params = vec![t(&[1.0])];
        let mut vel = vec![Tensor::zeros(vec![1, 1])];
        let g = t(&[1.0, 2.0]);
        assert!(sgd_momentum_step(&mut params, &[&g], &mut vel, 0.1, 0.0, 0.0).is_err());
    }

    #[test]
    fn schedule_drops_at_fractions() {
        let cfg = OptimizerConfig::default();
        let rates: Vec<f64> = (0..10).map(|e| cfg.rate_at(e, 10)).collect();
        assert_eq!(rates, [0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.01, 0.01, 0.001, 0.001]);
        assert_eq!(cfg.with_rate_scale(1.0), cfg);
    }

    #[test]
    fn validation_catches_bad_settings() {
        let ok = OptimizerConfig::default();
        assert!(ok.validate().is_ok());
        for bad in [
            OptimizerConfig { momentum: 1.0, ..ok.clone() },
            OptimizerConfig { batch_size: 0, ..ok.clone() },
            OptimizerConfig { schedule: vec![(0.1, 0.1)], ..ok.clone() },
            OptimizerConfig { schedule: vec![(0.0, 0.1), (0.5, 0.0)], ..ok.clone() },
            OptimizerConfig { schedule: vec![(0.0, 0.1), (0.5, 0.1), (0.4, 0.1)], ..ok.clone() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }
}
