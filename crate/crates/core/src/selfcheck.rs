//! End-to-end gradient check of the triangle loss, shared by
//! `gpgl gradcheck` and the test suite.
//!
//! Network 2-16-8-3 (input, hidden, feature, classes), five anchors whose
//! features come from the same network and are then frozen, and a batch of
//! random inputs. The loss weights are evaluated once at the base point and
//! held fixed, as they are during a training step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::anchor::{AnchorSet, AnchorSpec, NeighborCount};
use crate::diffcore::{finite_difference_check, GradCheckReport, ParamId, Tape, Tensor};
use crate::error::Result;
use crate::gp::KernelConfig;
use crate::losses::{loss_weights, record_triangle_loss, LossMagnitudes, LossWeights};
use crate::model::{Architecture, Model, ModelConfig, ModelSpec};

pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_TOLERANCE: f64 = 1e-3;
const BATCH: usize = 6;
const CLASSES: usize = 3;
const ANCHOR_LABELS: [usize; 5] = [0, 1, 2, 0, 1];

/// Outcome for one seed: the worst parameter tensor and its report.
#[derive(Clone, Debug)]
pub struct TriangleGradcheck {
    pub seed: u64,
    pub worst_param: String,
    pub worst: GradCheckReport<f64>,
    pub checked: usize,
}

impl TriangleGradcheck {
    pub fn passed(&self) -> bool {
        self.worst.max_rel_error < GRADCHECK_TOLERANCE
    }
}

struct Problem {
    model: Model<f64>,
    anchors: AnchorSet<f64>,
    inputs: Tensor<f64>,
    labels: Vec<usize>,
    weights: Vec<LossWeights>,
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.5..1.5)).collect();
    Tensor::matrix(rows, cols, data).expect("sized")
}

impl Problem {
    fn new(seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let config = ModelConfig {
            arch: Architecture::Mlp,
            hidden: vec![16],
            feature_dim: 8,
        };
        let model = Model::new(ModelSpec::new(&config, &[2], CLASSES, rng.random())?)?;
        let anchor_inputs = random_matrix(&mut rng, ANCHOR_LABELS.len(), 2);
        let inputs = random_matrix(&mut rng, BATCH, 2);
        let labels: Vec<usize> = (0..BATCH).map(|_| rng.random_range(0..CLASSES)).collect();
        let mut indices = vec![Vec::new(); CLASSES];
        for (i, &c) in ANCHOR_LABELS.iter().enumerate() {
            indices[c].push(i);
        }
        let spec = AnchorSpec {
            per_class_count: 2,
            c_cor: NeighborCount::All,
            top_k: CLASSES,
            ..AnchorSpec::default()
        };
        let kernel = KernelConfig::default().with_length_scale(1.0);
        let anchors = AnchorSet::build(indices, spec, kernel, |flat| {
            let rows: Vec<Vec<f64>> = flat.iter().map(|&i| anchor_inputs.row(i).to_vec()).collect();
            model.features(&Tensor::from_rows(&rows)?)
        })?;
        let mu = rng.random_range(0.2..0.8);
        let mags = LossMagnitudes {
            ce1: rng.random_range(0.5..2.0),
            ce2: rng.random_range(0.5..2.0),
            kl: rng.random_range(0.5..2.0),
        };
        let h = model.features(&inputs)?;
        let weights = (0..BATCH)
            .map(|b| {
                let variance = anchors.context_label(h.row(b), labels[b])?.variance;
                loss_weights(mu, &mags, variance, false)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            model,
            anchors,
            inputs,
            labels,
            weights,
        })
    }

    fn loss(&self, model: &Model<f64>) -> Result<(f64, crate::diffcore::GradientMap<f64>)> {
        let mut tape = Tape::new();
        let fw = model.record_forward(&mut tape, self.inputs.clone())?;
        let (y_star, _) = self.anchors.record_context_labels(&mut tape, fw.features, &self.labels)?;
        let terms = record_triangle_loss(&mut tape, fw.log_probs, y_star, &self.labels, &self.weights)?;
        Ok((tape.value(terms.combined).item(), tape.backward(terms.combined)?))
    }
}

/// Central differences on every parameter coordinate against the tape.
pub fn triangle_gradcheck(seed: u64) -> Result<TriangleGradcheck> {
    let problem = Problem::new(seed)?;
    let (_, grads) = problem.loss(&problem.model)?;
    let mut worst: Option<(String, GradCheckReport<f64>)> = None;
    let mut checked = 0;
    for (i, info) in problem.model.param_info().iter().enumerate() {
        let analytic = grads.get(ParamId(i)).cloned().unwrap_or_else(|| Tensor::zeros(problem.model.params()[i].shape().to_vec()));
        let report = finite_difference_check(
            |p| {
                let mut probe = problem.model.clone();
                probe.params_mut()[i] = p.clone();
                Ok(problem.loss(&probe)?.0)
            },
            &problem.model.params()[i],
            &analytic,
            GRADCHECK_STEP,
            |_| false,
        )?;
        checked += report.checked;
        if worst.as_ref().is_none_or(|(_, w)| report.max_rel_error > w.max_rel_error) {
            worst = Some((info.name.clone(), report));
        }
    }
    let (worst_param, worst) = worst.expect("model has parameters");
    Ok(TriangleGradcheck {
        seed,
        worst_param,
        worst,
        checked,
    })
}
