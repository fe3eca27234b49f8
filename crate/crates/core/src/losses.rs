//! Triangle consistency loss: prediction vs truth, context label vs
//! prediction, and context label vs truth, with per-sample weights.
//!
//! `ce1` and `kl` reach every parameter; `ce2` reaches the feature extractor
//! only, through the GP posterior mean.

use serde::{Deserialize, Serialize};

use crate::diffcore::{GradientMap, ParamGroup, Scope, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Tolerance on `Σp = 1` accepted by [`kl`].
const SIMPLEX_TOLERANCE: f64 = 1e-9;

pub fn ce1<T: Scalar>(y_hat: &[T], y: usize) -> Result<T> {
    let p = *y_hat
        .get(y)
        .ok_or_else(|| Error::Contract(format!("class {y} out of range for {} outputs", y_hat.len())))?;
    if !(p > T::zero()) {
        return Err(Error::domain("ce1", format!("probability {p:e} at true class")));
    }
    Ok(-p.ln())
}

/// `−log y*[y]`.
pub fn ce2<T: Scalar>(y_star: &[T], y: usize) -> Result<T> {
    ce1(y_star, y).map_err(|e| match e {
        Error::Domain { detail, .. } => Error::domain("ce2", detail),
        other => other,
    })
}

fn check_simplex<T: Scalar>(name: &str, p: &[T]) -> Result<()> {
    let total = p.iter().fold(T::zero(), |a, &x| a + x);
    if p.iter().any(|&x| !(x > T::zero())) || (total - T::one()).abs() > T::lit(SIMPLEX_TOLERANCE) {
        return Err(Error::Contract(format!("{name} is not a strictly positive distribution")));
    }
    Ok(())
}

/// `KL(y* ‖ ŷ) = Σ y*_j log(y*_j / ŷ_j)`.
pub fn kl<T: Scalar>(y_star: &[T], y_hat: &[T]) -> Result<T> {
    if y_star.len() != y_hat.len() {
        return Err(Error::shape("kl", format!("{} vs {}", y_star.len(), y_hat.len())));
    }
    check_simplex("context label", y_star)?;
    check_simplex("prediction", y_hat)?;
    Ok(y_star
        .iter()
        .zip(y_hat)
        .fold(T::zero(), |acc, (&p, &q)| acc + p * (p / q).ln()))
}

/// Epoch-mean absolute loss values; all start at 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossMagnitudes {
    pub ce1: f64,
    pub ce2: f64,
    pub kl: f64,
}

impl Default for LossMagnitudes {
    fn default() -> Self {
        Self {
            ce1: 1.0,
            ce2: 1.0,
            kl: 1.0,
        }
    }
}

/// Magnitudes below this are treated as this value when dividing.
pub const MAGNITUDE_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub mu: f64,
    pub variance: f64,
}

/// α = 1/(2−μ);
/// β = |ce1|(1−μ) / (2|ce2|(2−μ)(1+g_v)) weighting `kl`;
/// γ = |ce1|(1−μ) / (2|kl|(2−μ)(1+g_v)) weighting `ce2`.
///
/// `swap_denominators` exchanges `|ce2|` and `|kl|` between β and γ.
pub fn loss_weights(mu: f64, mags: &LossMagnitudes, variance: f64, swap_denominators: bool) -> Result<LossWeights> {
    if !(0.0..=1.0).contains(&mu) {
        return Err(Error::Contract(format!("error rate mu = {mu} outside [0, 1]")));
    }
    if !(variance >= 0.0) {
        return Err(Error::Contract(format!("variance {variance} is negative")));
    }
    let (beta_den, gamma_den) = if swap_denominators {
        (mags.kl, mags.ce2)
    } else {
        (mags.ce2, mags.kl)
    };
    let shared = mags.ce1 * (1.0 - mu) / (2.0 * (2.0 - mu) * (1.0 + variance));
    Ok(LossWeights {
        alpha: 1.0 / (2.0 - mu),
        beta: shared / beta_den.max(MAGNITUDE_FLOOR),
        gamma: shared / gamma_den.max(MAGNITUDE_FLOOR),
        mu,
        variance,
    })
}

/// Per-sample loss values and the combined scalar node of one batch.
pub struct TriangleTerms<T> {
    pub combined: Var,
    pub ce1: Vec<T>,
    pub kl: Vec<T>,
    pub ce2: Vec<T>,
}

fn column<T: Scalar>(values: impl Iterator<Item = f64>) -> Tensor<T> {
    let data: Vec<T> = values.map(T::lit).collect();
    let n = data.len();
    Tensor::new(vec![n, 1], data).expect("column")
}

/// Plain cross-entropy baseline `mean_b −log ŷ_b[y_b]` from `B × C`
/// log-probabilities.
pub fn record_cross_entropy<T: Scalar>(tape: &mut Tape<T>, log_probs: Var, labels: &[usize]) -> Result<(Var, Vec<T>)> {
    let picked = tape.pick(log_probs, labels)?;
    let nll = tape.scale(picked, -T::one());
    let per_sample = tape.value(nll).data().to_vec();
    Ok((tape.mean(nll)?, per_sample))
}

/// Records `mean_b(α·ce1_b + β_b·kl_b + γ_b·ce2_b)`. `log_probs` holds the
/// prediction as `B × C` log-probabilities (so confident rows never hit
/// `log 0`); `y_star` holds context labels, which must depend on the
/// parameters only through the feature extractor.
pub fn record_triangle_loss<T: Scalar>(
    tape: &mut Tape<T>,
    log_probs: Var,
    y_star: Var,
    labels: &[usize],
    weights: &[LossWeights],
) -> Result<TriangleTerms<T>> {
    let b = labels.len();
    if weights.len() != b || tape.value(log_probs).rows() != b || tape.value(y_star).shape() != tape.value(log_probs).shape() {
        return Err(Error::shape(
            "triangle_loss",
            format!(
                "{} labels, {} weights, log_probs {:?}, y_star {:?}",
                b,
                weights.len(),
                tape.value(log_probs).shape(),
                tape.value(y_star).shape()
            ),
        ));
    }
    // ce1
    let log_p_true = tape.pick(log_probs, labels)?;
    let ce1_col = tape.scale(log_p_true, -T::one());
    // kl
    let log_star = tape.log(y_star)?;
    let log_ratio = tape.sub(log_star, log_probs)?;
    let kl_terms = tape.mul(y_star, log_ratio)?;
    let kl_col = tape.sum_rows(kl_terms);
    // ce2, feature extractor only
    let star_true = tape.pick(y_star, labels)?;
    let log_star_true = tape.log(star_true)?;
    let ce2_raw = tape.scale(log_star_true, -T::one());
    let ce2_col = tape.scoped(ce2_raw, Scope::FeatureExtractor);

    let alpha = tape.constant(column(weights.iter().map(|w| w.alpha)));
    let beta = tape.constant(column(weights.iter().map(|w| w.beta)));
    let gamma = tape.constant(column(weights.iter().map(|w| w.gamma)));
    let a = tape.mul(alpha, ce1_col)?;
    let k = tape.mul(beta, kl_col)?;
    let c = tape.mul(gamma, ce2_col)?;
    let ak = tape.add(a, k)?;
    let total = tape.add(ak, c)?;
    let combined = tape.mean(total)?;
    Ok(TriangleTerms {
        combined,
        ce1: tape.value(ce1_col).data().to_vec(),
        kl: tape.value(kl_col).data().to_vec(),
        ce2: tape.value(ce2_col).data().to_vec(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TriangleLossReport {
    pub ce1: f64,
    pub kl: f64,
    pub ce2: f64,
    pub weights: Vec<LossWeights>,
    pub combined: f64,
    pub feature_grad_norm: f64,
    pub head_grad_norm: f64,
}

fn mean<T: Scalar>(v: &[T]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.iter().map(|x| x.as_f64()).sum::<f64>() / v.len() as f64
}

impl TriangleLossReport {
    pub fn new<T: Scalar>(terms: &TriangleTerms<T>, tape: &Tape<T>, weights: Vec<LossWeights>, grads: &GradientMap<T>) -> Self {
        Self {
            ce1: mean(&terms.ce1),
            kl: mean(&terms.kl),
            ce2: mean(&terms.ce2),
            weights,
            combined: tape.value(terms.combined).item().as_f64(),
            feature_grad_norm: grads.group_norm(ParamGroup::FeatureExtractor).as_f64(),
            head_grad_norm: grads.group_norm(ParamGroup::Head).as_f64(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{softmax_rows, ParamId};
    use proptest::prelude::*;

    const LN10: f64 = std::f64::consts::LN_10;

    #[test]
    fn ce1_examples() {
        let eps = 1e-9;
        let near_one_hot = [1.0 - 2.0 * eps, eps, eps];
        assert!(ce1(&near_one_hot, 0).unwrap() < 1e-8);
        assert!((ce1(&[0.1; 10], 3).unwrap() - LN10).abs() < 1e-12);
        assert!((ce1(&[0.7f64, 0.3], 1).unwrap() - 1.203_972_804_325_936).abs() < 1e-12);
        assert!(matches!(ce1(&[1.0, 0.0], 1), Err(Error::Domain { op: "ce1", .. })));
    }

    #[test]
    fn ce2_examples() {
        assert!((ce2(&[0.7f64, 0.3], 0).unwrap() - 0.356_674_943_938_732_4).abs() < 1e-12);
        assert!(matches!(ce2(&[1.0, 0.0], 1), Err(Error::Domain { op: "ce2", .. })));
    }

    #[test]
    fn kl_examples() {
        let p = [0.2, 0.5, 0.3];
        assert_eq!(kl(&p, &p).unwrap(), 0.0);
        // 0.7 ln 1.4 + 0.3 ln 0.6
        let expected = 0.7 * (1.4f64).ln() + 0.3 * (0.6f64).ln();
        assert!((expected - 0.082_282).abs() < 1e-6);
        assert!((kl(&[0.7, 0.3], &[0.5, 0.5]).unwrap() - expected).abs() < 1e-15);
        let floor = 1e-6;
        let mut one_hot = vec![floor; 10];
        one_hot[0] = 1.0 - 9.0 * floor;
        assert!((kl(&one_hot, &[0.1; 10]).unwrap() - LN10).abs() < 1e-3);
        assert!(matches!(kl(&[0.5, 0.6], &[0.5, 0.5]), Err(Error::Contract(_))));
        assert!(matches!(kl(&[1.0, 0.0], &[0.5, 0.5]), Err(Error::Contract(_))));
    }

    #[test]
    fn weight_examples() {
        let ones = LossMagnitudes::default();
        let w = loss_weights(1.0, &ones, 0.3, false).unwrap();
        assert_eq!((w.alpha, w.beta, w.gamma), (1.0, 0.0, 0.0));
        let w = loss_weights(0.9, &ones, 0.0, false).unwrap();
        assert!((w.alpha - 0.909_091).abs() < 1e-6);
        assert!((w.beta - 0.045_455).abs() < 1e-6);
        assert_eq!(w.beta, w.gamma);
        let w = loss_weights(0.9, &ones, 1.0, false).unwrap();
        assert!((w.beta - 0.022_727).abs() < 1e-6);
        assert!(loss_weights(1.5, &ones, 0.0, false).is_err());
    }

    #[test]
    fn denominators_as_printed_and_swapped() {
        let mags = LossMagnitudes { ce1: 2.0, ce2: 4.0, kl: 0.5 };
        let w = loss_weights(0.5, &mags, 0.0, false).unwrap();
        let shared = 2.0 * 0.5 / (2.0 * 1.5);
        assert!((w.beta - shared / 4.0).abs() < 1e-15);
        assert!((w.gamma - shared / 0.5).abs() < 1e-15);
        let s = loss_weights(0.5, &mags, 0.0, true).unwrap();
        assert_eq!((s.beta, s.gamma), (w.gamma, w.beta));
    }

    fn logits_case() -> (Tensor<f64>, Tensor<f64>, Vec<usize>) {
        let logits = Tensor::matrix(2, 3, vec![0.2, -0.1, 0.5, 1.0, 0.3, -0.7]).unwrap();
        let star = Tensor::matrix(2, 3, vec![0.6, 0.3, 0.1, 0.2, 0.7, 0.1]).unwrap();
        (logits, star, vec![0, 1])
    }

    #[test]
    fn zero_context_weights_reduce_to_weighted_ce() {
        let (logits, star, labels) = logits_case();
        let w = loss_weights(1.0, &LossMagnitudes::default(), 0.0, false).unwrap();
        let mut tape = Tape::new();
        let l = tape.param(ParamId(0), ParamGroup::Head, logits.clone());
        let lp = tape.log_softmax_rows(l);
        let s = tape.constant(star.clone());
        let terms = record_triangle_loss(&mut tape, lp, s, &labels, &[w, w]).unwrap();
        let g_tri = tape.backward(terms.combined).unwrap();

        let mut base = Tape::new();
        let l = base.param(ParamId(0), ParamGroup::Head, logits);
        let lp = base.log_softmax_rows(l);
        let (ce, _) = record_cross_entropy(&mut base, lp, &labels).unwrap();
        let g_base = base.backward(ce).unwrap();
        assert_eq!(tape.value(terms.combined).item(), base.value(ce).item());
        assert_eq!(g_tri, g_base);
    }

    #[test]
    fn combined_is_weighted_batch_mean() {
        let (logits, star, labels) = logits_case();
        let mags = LossMagnitudes { ce1: 1.3, ce2: 0.8, kl: 0.4 };
        let weights = [
            loss_weights(0.4, &mags, 0.1, false).unwrap(),
            loss_weights(0.4, &mags, 0.9, false).unwrap(),
        ];
        assert!(weights[0].beta > weights[1].beta);
        let mut tape = Tape::new();
        let probs = softmax_rows(&logits);
        let l = tape.constant(logits);
        let lp = tape.log_softmax_rows(l);
        let s = tape.constant(star);
        let terms = record_triangle_loss(&mut tape, lp, s, &labels, &weights).unwrap();
        let mut expected = 0.0;
        for b in 0..2 {
            let st = tape.value(s).row(b).to_vec();
            let w = weights[b];
            expected += w.alpha * ce1(probs.row(b), labels[b]).unwrap()
                + w.beta * kl(&st, probs.row(b)).unwrap()
                + w.gamma * ce2(&st, labels[b]).unwrap();
        }
        assert!((tape.value(terms.combined).item() - expected / 2.0).abs() < 1e-13);
    }

    #[test]
    fn ce2_alone_never_touches_head() {
        // Head parameter feeds y_star directly here; the scope must still block it.
        let (logits, _, labels) = logits_case();
        let w = LossWeights { alpha: 0.0, beta: 0.0, gamma: 1.0, mu: 0.0, variance: 0.0 };
        let mut tape = Tape::new();
        let l = tape.param(ParamId(1), ParamGroup::Head, logits);
        let lp = tape.log_softmax_rows(l);
        let y = tape.softmax_rows(l);
        let terms = record_triangle_loss(&mut tape, lp, y, &labels, &[w, w]).unwrap();
        let g = tape.backward(terms.combined).unwrap();
        assert!(g.get(ParamId(1)).unwrap().data().iter().all(|&x| x == 0.0));
    }

    proptest! {
        #[test]
        fn kl_is_non_negative(a in prop::collection::vec(0.01f64..1.0, 2..8), b in prop::collection::vec(0.01f64..1.0, 8)) {
            let n = a.len();
            let p = softmax_rows(&Tensor::row_vector(a)).into_data();
            let q = softmax_rows(&Tensor::row_vector(b[..n].to_vec())).into_data();
            prop_assert!(kl(&p, &q).unwrap() >= 0.0);
        }

        #[test]
        fn weights_are_bounded_and_monotone(mu in 0.0f64..=1.0, v1 in 0.0f64..1.0, v2 in 0.0f64..1.0, m in 0.1f64..3.0) {
            let mags = LossMagnitudes { ce1: 1.0, ce2: m, kl: m };
            let a = loss_weights(mu, &mags, v1.min(v2), false).unwrap();
            let b = loss_weights(mu, &mags, v1.max(v2), false).unwrap();
            prop_assert!(a.alpha >= 0.5 && a.alpha <= 1.0);
            prop_assert!(b.beta <= a.beta && b.gamma <= a.gamma);
            prop_assert_eq!(a.beta, a.gamma);
            let higher = loss_weights((mu + 0.05).min(1.0), &mags, v1, false).unwrap();
            let here = loss_weights(mu, &mags, v1, false).unwrap();
            prop_assert!(higher.beta <= here.beta);
        }
    }
}
