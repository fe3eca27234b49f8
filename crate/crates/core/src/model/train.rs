//! Epoch loop for the plain cross-entropy baseline and the GP-guided
//! (`gpgl`) scheme.
//!
//! Per epoch in `gpgl` mode: every batch queries the frozen anchor GP for
//! context labels, weights the triangle loss with the current `μ` and the
//! previous epoch's loss magnitudes, and takes one SGD step. At the epoch
//! boundary the model is evaluated on the validation split (giving the next
//! `μ`), then the anchor features and GP factors are rebuilt.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::net::{argmax, Model, ModelConfig, ModelSpec};
use super::optim::{OptimizerConfig, SgdMomentum};
use crate::anchor::{sample_anchors, top_mass, AnchorSet, AnchorSpec};
use crate::data::{Dataset, Splits};
use crate::diffcore::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::gp::KernelConfig;
use crate::losses::{loss_weights, record_cross_entropy, record_triangle_loss, LossMagnitudes};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Baseline,
    Gpgl,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Baseline => "baseline",
            Mode::Gpgl => "gpgl",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "gpgl" => Ok(Mode::Gpgl),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

/// Random streams derived from the root seed, one per purpose, so that
/// e.g. anchor sampling never perturbs the batch order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Data = 1,
    Split = 2,
    Init = 3,
    Shuffle = 4,
    Anchors = 5,
}

pub fn stream_rng(root: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(root);
    rng.set_stream(stream as u64);
    rng
}

pub fn stream_seed(root: u64, stream: Stream) -> u64 {
    stream_rng(root, stream).next_u64()
}

/// Source of the error rate `μ` used in the loss weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MuPolicy {
    /// Start at `1 − 1/C`, then take each epoch's validation error.
    Adaptive,
    Pinned(f64),
}

impl Serialize for MuPolicy {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            MuPolicy::Adaptive => s.serialize_str("adaptive"),
            MuPolicy::Pinned(mu) => s.serialize_f64(*mu),
        }
    }
}

impl<'de> Deserialize<'de> for MuPolicy {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(mu) => Ok(MuPolicy::Pinned(mu)),
            Raw::Str(s) if s == "adaptive" => Ok(MuPolicy::Adaptive),
            Raw::Str(s) => Err(serde::de::Error::custom(format!(
                "mu must be \"adaptive\" or a number, got {s:?}"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpglConfig {
    /// Exchange `|ce2|` and `|kl|` between the β and γ denominators.
    pub swap_norm_denominators: bool,
    pub mu: MuPolicy,
}

impl Default for GpglConfig {
    fn default() -> Self {
        Self {
            swap_norm_denominators: false,
            mu: MuPolicy::Adaptive,
        }
    }
}

/// Everything the loop needs besides the data and the model.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub kernel: KernelConfig,
    pub anchors: AnchorSpec,
    pub gpgl: GpglConfig,
}

impl TrainConfig {
    pub fn validate(&self, classes: usize) -> Result<()> {
        self.optimizer.validate()?;
        self.kernel.validate()?;
        self.anchors.validate(classes)?;
        if let MuPolicy::Pinned(mu) = self.gpgl.mu {
            if !(0.0..=1.0).contains(&mu) {
                return Err(Error::Config(format!("pinned mu {mu} not in [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub mode: Mode,
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub batches: usize,
    /// Error rate that weighted this epoch's losses.
    pub mu: f64,
    pub train_error: f64,
    /// Validation error at the end of the epoch; the next epoch's `μ`.
    pub val_error: f64,
    pub mag_ce1: f64,
    pub mag_kl: Option<f64>,
    pub mag_ce2: Option<f64>,
    pub mean_variance: Option<f64>,
    /// Mean share of the five largest components of the untruncated
    /// context label.
    pub top_mass: Option<f64>,
    /// Mean distance of anchor features to their class mean, after refresh.
    pub anchor_spread: Option<f64>,
    /// `anchor_spread` over the mean distance between class means.
    pub anchor_spread_ratio: Option<f64>,
}

/// Fraction of rows whose argmax (lowest index on ties) differs from the label.
pub fn error_rate<T: Scalar>(probs: &Tensor<T>, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let wrong = labels
        .iter()
        .enumerate()
        .filter(|&(r, &y)| argmax(probs.row(r)) != y)
        .count();
    wrong as f64 / labels.len() as f64
}

const EVAL_CHUNK: usize = 1024;

pub fn evaluate<T: Scalar>(model: &Model<T>, data: &Dataset<T>) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Contract("evaluation set is empty".into()));
    }
    let all: Vec<usize> = (0..data.len()).collect();
    let mut wrong = 0.0;
    for chunk in all.chunks(EVAL_CHUNK) {
        let (_, probs) = model.forward(&data.rows(chunk))?;
        let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
        wrong += error_rate(&probs, &labels) * chunk.len() as f64;
    }
    Ok(wrong / data.len() as f64)
}

/// Mean Euclidean distance from each anchor feature to its class mean.
pub fn anchor_spread<T: Scalar>(anchors: &AnchorSet<T>) -> f64 {
    let labels = anchors.flat_labels();
    let (features, means) = (anchors.features(), anchors.class_means());
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(r, &c)| {
            features
                .row(r)
                .iter()
                .zip(means.row(c))
                .map(|(&a, &m)| (a - m).as_f64().powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    total / labels.len().max(1) as f64
}

/// [`anchor_spread`] divided by the mean pairwise distance between class
/// means, which discounts a uniform growth of the feature scale. `None` when
/// all class means coincide.
pub fn anchor_spread_ratio<T: Scalar>(anchors: &AnchorSet<T>) -> Option<f64> {
    let means = anchors.class_means();
    let c = means.rows();
    let mut total = 0.0;
    for i in 0..c {
        for j in 0..i {
            total += crate::gp::squared_distance(means.row(i), means.row(j)).as_f64().sqrt();
        }
    }
    let pairs = (c * (c - 1) / 2).max(1) as f64;
    (total > 0.0).then(|| anchor_spread(anchors) / (total / pairs))
}

#[derive(Default)]
struct EpochAccumulator {
    batches: usize,
    samples: usize,
    wrong: usize,
    ce1: f64,
    kl: f64,
    ce2: f64,
    variance: f64,
    top_mass: f64,
}

pub struct Trainer<T: Scalar> {
    mode: Mode,
    config: TrainConfig,
    model: Model<T>,
    optimizer: SgdMomentum<T>,
    shuffle: ChaCha8Rng,
    anchors: Option<AnchorSet<T>>,
    mu: f64,
    magnitudes: LossMagnitudes,
    epoch: usize,
}

impl<T: Scalar> Trainer<T> {
    /// Initializes the model from `seed`, and in `gpgl` mode samples the
    /// anchors and builds the GP from the untrained extractor.
    pub fn new(mode: Mode, config: TrainConfig, train: &Dataset<T>, seed: u64) -> Result<Self> {
        config.validate(train.classes)?;
        if config.optimizer.batch_size > train.len() {
            return Err(Error::Config(format!(
                "batch size {} exceeds {} training samples",
                config.optimizer.batch_size,
                train.len()
            )));
        }
        let spec = ModelSpec::new(&config.model, &train.input_shape, train.classes, stream_seed(seed, Stream::Init))?;
        let model = Model::new(spec)?;
        let optimizer = SgdMomentum::new(model.params(), config.optimizer.momentum, config.optimizer.weight_decay);
        let anchors = match mode {
            Mode::Baseline => None,
            Mode::Gpgl => {
                let mut rng = stream_rng(seed, Stream::Anchors);
                let indices = sample_anchors(&train.labels, train.classes, config.anchors.per_class_count, &mut rng)?;
                Some(AnchorSet::build(indices, config.anchors, config.kernel, |flat| {
                    model.features(&train.rows(flat))
                })?)
            }
        };
        let mu = match config.gpgl.mu {
            MuPolicy::Adaptive => 1.0 - 1.0 / train.classes as f64,
            MuPolicy::Pinned(mu) => mu,
        };
        Ok(Self {
            mode,
            config,
            model,
            optimizer,
            shuffle: stream_rng(seed, Stream::Shuffle),
            anchors,
            mu,
            magnitudes: LossMagnitudes::default(),
            epoch: 0,
        })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn model(&self) -> &Model<T> {
        &self.model
    }

    pub fn anchors(&self) -> Option<&AnchorSet<T>> {
        self.anchors.as_ref()
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn magnitudes(&self) -> LossMagnitudes {
        self.magnitudes
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    fn step_batch(&mut self, train: &Dataset<T>, batch: &[usize], acc: &mut EpochAccumulator, lr: f64) -> Result<()> {
        let labels: Vec<usize> = batch.iter().map(|&i| train.labels[i]).collect();
        let mut tape = Tape::new();
        let fw = self.model.record_forward(&mut tape, train.rows(batch))?;
        let loss = match &self.anchors {
            None => {
                let (loss, ce) = record_cross_entropy(&mut tape, fw.log_probs, &labels)?;
                acc.ce1 += ce.iter().map(|x| x.as_f64().abs()).sum::<f64>();
                loss
            }
            Some(anchors) => {
                let (y_star, contexts) = anchors.record_context_labels(&mut tape, fw.features, &labels)?;
                let weights = contexts
                    .iter()
                    .map(|c| {
                        loss_weights(
                            self.mu,
                            &self.magnitudes,
                            c.variance.as_f64(),
                            self.config.gpgl.swap_norm_denominators,
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;
                let terms = record_triangle_loss(&mut tape, fw.log_probs, y_star, &labels, &weights)?;
                let floor = T::lit(self.config.anchors.floor);
                for (b, c) in contexts.iter().enumerate() {
                    acc.ce1 += terms.ce1[b].as_f64().abs();
                    acc.kl += terms.kl[b].as_f64().abs();
                    acc.ce2 += terms.ce2[b].as_f64().abs();
                    acc.variance += c.variance.as_f64();
                    acc.top_mass += top_mass(&c.raw_mean, floor).as_f64();
                }
                terms.combined
            }
        };
        let probs = tape.value(fw.probs);
        acc.wrong += (0..labels.len()).filter(|&r| argmax(probs.row(r)) != labels[r]).count();
        acc.samples += labels.len();
        acc.batches += 1;
        let grads = tape.backward(loss)?;
        self.optimizer.step(self.model.params_mut(), &grads, lr)
    }

    /// One pass over `train` in seeded shuffled order (final short batch
    /// kept), then evaluation on `val` and, in `gpgl` mode, the anchor refresh.
    pub fn train_epoch(&mut self, train: &Dataset<T>, val: &Dataset<T>) -> Result<EpochStats> {
        let opt = &self.config.optimizer;
        let lr = opt.rate_at(self.epoch, opt.epochs);
        let batch_size = opt.batch_size;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.shuffle);
        let mut acc = EpochAccumulator::default();
        for batch in order.chunks(batch_size) {
            self.step_batch(train, batch, &mut acc, lr)?;
        }
        let mu_used = self.mu;
        let val_error = evaluate(&self.model, val)?;
        if self.config.gpgl.mu == MuPolicy::Adaptive {
            self.mu = val_error;
        }
        let n = acc.samples.max(1) as f64;
        let gp = self.anchors.is_some();
        let per = |x: f64| gp.then_some(x / n);
        if gp {
            self.magnitudes = LossMagnitudes {
                ce1: acc.ce1 / n,
                ce2: acc.ce2 / n,
                kl: acc.kl / n,
            };
        }
        let model = &self.model;
        if let Some(anchors) = self.anchors.as_mut() {
            anchors.refresh(|flat| model.features(&train.rows(flat)))?;
        }
        self.epoch += 1;
        Ok(EpochStats {
            mode: self.mode,
            epoch: self.epoch,
            lr,
            batches: acc.batches,
            mu: mu_used,
            train_error: acc.wrong as f64 / n,
            val_error,
            mag_ce1: acc.ce1 / n,
            mag_kl: per(acc.kl),
            mag_ce2: per(acc.ce2),
            mean_variance: per(acc.variance),
            top_mass: per(acc.top_mass),
            anchor_spread: self.anchors.as_ref().map(anchor_spread),
            anchor_spread_ratio: self.anchors.as_ref().and_then(anchor_spread_ratio),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunHistory {
    pub mode: Mode,
    /// `μ` before any training.
    pub initial_mu: f64,
    pub epochs: Vec<EpochStats>,
    /// Wall-clock seconds per epoch, kept apart from the reproducible stats.
    pub wall_seconds: Vec<f64>,
}

impl RunHistory {
    /// Last validation error, or the initial `μ` for an empty run.
    pub fn final_error(&self) -> f64 {
        self.epochs.last().map_or(self.initial_mu, |e| e.val_error)
    }
}

pub fn train_run<T: Scalar>(mode: Mode, config: &TrainConfig, splits: &Splits<T>, seed: u64) -> Result<RunHistory> {
    let mut trainer = Trainer::new(mode, config.clone(), &splits.train, seed)?;
    let initial_mu = trainer.mu();
    let mut epochs = Vec::with_capacity(config.optimizer.epochs);
    let mut wall_seconds = Vec::with_capacity(config.optimizer.epochs);
    for _ in 0..config.optimizer.epochs {
        let start = Instant::now();
        let stats = trainer.train_epoch(&splits.train, &splits.val)?;
        wall_seconds.push(start.elapsed().as_secs_f64());
        log::debug!(
            "{mode} epoch {}: train {:.4} val {:.4}",
            stats.epoch,
            stats.train_error,
            stats.val_error
        );
        epochs.push(stats);
    }
    Ok(RunHistory {
        mode,
        initial_mu,
        epochs,
        wall_seconds,
    })
}

/// Target error for the convergence-speed comparison.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Threshold {
    /// Baseline's final validation error plus a margin.
    BaselinePlus(f64),
    Fixed(f64),
}

impl Default for Threshold {
    fn default() -> Self {
        Threshold::BaselinePlus(0.01)
    }
}

impl fmt::Display for Threshold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Threshold::BaselinePlus(m) => write!(f, "baseline+{m}"),
            Threshold::Fixed(t) => write!(f, "{t}"),
        }
    }
}

impl FromStr for Threshold {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("threshold must be a number or \"baseline+<margin>\", got {s:?}"));
        match s.trim().strip_prefix("baseline+") {
            Some(m) => m.parse().map(Threshold::BaselinePlus).map_err(|_| bad()),
            None => s.trim().parse().map(Threshold::Fixed).map_err(|_| bad()),
        }
    }
}

impl Serialize for Threshold {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Threshold::Fixed(t) => s.serialize_f64(*t),
            other => s.serialize_str(&other.to_string()),
        }
    }
}

impl<'de> Deserialize<'de> for Threshold {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(t) => Ok(Threshold::Fixed(t)),
            Raw::Str(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// First 1-based epoch whose validation error is at or below `threshold`.
pub fn epochs_to_threshold(epochs: &[EpochStats], threshold: f64) -> Option<usize> {
    epochs.iter().find(|e| e.val_error <= threshold).map(|e| e.epoch)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentResult {
    pub seed: u64,
    pub baseline: RunHistory,
    pub gpgl: RunHistory,
    pub threshold: f64,
    pub baseline_epochs: Option<usize>,
    pub gpgl_epochs: Option<usize>,
}

/// Runs both modes from the same seed: same split, initialization and batch
/// order.
pub fn run_experiment<T: Scalar>(
    config: &TrainConfig,
    splits: &Splits<T>,
    seed: u64,
    threshold: Threshold,
) -> Result<ExperimentResult> {
    let baseline = train_run(Mode::Baseline, config, splits, seed)?;
    let gpgl = train_run(Mode::Gpgl, config, splits, seed)?;
    let threshold = match threshold {
        Threshold::BaselinePlus(margin) => baseline.final_error() + margin,
        Threshold::Fixed(t) => t,
    };
    Ok(ExperimentResult {
        seed,
        baseline_epochs: epochs_to_threshold(&baseline.epochs, threshold),
        gpgl_epochs: epochs_to_threshold(&gpgl.epochs, threshold),
        baseline,
        gpgl,
        threshold,
    })
}
