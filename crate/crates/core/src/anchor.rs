//! Class-aware anchor sets and per-sample context labels.
//!
//! An [`AnchorSet`] is rebuilt at every epoch boundary from the current
//! feature extractor and is read-only in between. For a sample of class `c`
//! the GP is restricted to the anchors of `c` and its `c_cor` nearest classes
//! (by distance between class-mean features); with `c_cor = all` a single
//! global snapshot is used.

use std::fmt;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::diffcore::{CustomOp, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::gp::{record_posterior_mean, squared_distance, GpSnapshot, KernelConfig, SnapshotDump};
use crate::scalar::Scalar;

pub const DEFAULT_FLOOR: f64 = 1e-6;
/// Number of leading components summed by the top-mass diagnostic.
pub const TOP_MASS_K: usize = 5;

/// Number of neighbor classes whose anchors join a sample's GP query.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NeighborCount {
    All,
    Count(usize),
}

impl fmt::Display for NeighborCount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NeighborCount::All => f.write_str("all"),
            NeighborCount::Count(n) => write!(f, "{n}"),
        }
    }
}

impl std::str::FromStr for NeighborCount {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(NeighborCount::All);
        }
        s.parse()
            .map(NeighborCount::Count)
            .map_err(|_| Error::Config(format!("c_cor must be an integer or \"all\", got {s:?}")))
    }
}

impl Serialize for NeighborCount {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            NeighborCount::All => s.serialize_str("all"),
            NeighborCount::Count(n) => s.serialize_u64(*n as u64),
        }
    }
}

impl<'de> Deserialize<'de> for NeighborCount {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(u64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Int(n) => Ok(NeighborCount::Count(n as usize)),
            Raw::Str(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorSpec {
    pub per_class_count: usize,
    pub c_cor: NeighborCount,
    pub top_k: usize,
    /// Floor ε applied to context-label components.
    pub floor: f64,
}

impl Default for AnchorSpec {
    fn default() -> Self {
        Self {
            per_class_count: 12,
            c_cor: NeighborCount::All,
            top_k: 5,
            floor: DEFAULT_FLOOR,
        }
    }
}

impl AnchorSpec {
    /// Splits a total anchor budget evenly across classes (at least one each).
    pub fn per_class_from_budget(total: usize, classes: usize) -> usize {
        (total / classes.max(1)).max(1)
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        if self.per_class_count == 0 {
            return Err(Error::Config("anchor per_class_count must be at least 1".into()));
        }
        if self.top_k == 0 || self.top_k > classes {
            return Err(Error::Config(format!(
                "top_k must be in [1, {classes}], got {}",
                self.top_k
            )));
        }
        if let NeighborCount::Count(0) = self.c_cor {
            return Err(Error::Config("c_cor must be at least 1".into()));
        }
        if !(self.floor >= 0.0 && self.floor * (classes as f64) < 1.0) {
            return Err(Error::Config(format!(
                "floor must satisfy 0 <= floor < 1/C, got {}",
                self.floor
            )));
        }
        Ok(())
    }
}

/// Seeded per-class sampling without replacement. Classes with fewer than
/// `per_class_count` samples contribute all of them. Indices come back in
/// ascending order within each class.
pub fn sample_anchors<R: Rng>(
    labels: &[usize],
    classes: usize,
    per_class_count: usize,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    let mut by_class = vec![Vec::new(); classes];
    for (i, &c) in labels.iter().enumerate() {
        if c >= classes {
            return Err(Error::Contract(format!("label {c} out of range for {classes} classes")));
        }
        by_class[c].push(i);
    }
    by_class
        .into_iter()
        .enumerate()
        .map(|(class, members)| {
            if members.is_empty() {
                return Err(Error::EmptyClass { class });
            }
            if members.len() <= per_class_count {
                return Ok(members);
            }
            let mut picked: Vec<usize> = sample(rng, members.len(), per_class_count)
                .into_iter()
                .map(|j| members[j])
                .collect();
            picked.sort_unstable();
            Ok(picked)
        })
        .collect()
}

/// For each class, the `c_cor` classes whose mean features are closest,
/// ties broken by lower class index. `c_cor ≥ C` is clamped to `C − 1`.
pub fn nearest_classes<T: Scalar>(class_means: &Tensor<T>, c_cor: usize) -> Result<Vec<Vec<usize>>> {
    let classes = class_means.rows();
    if classes < 2 {
        return Err(Error::Contract("nearest_classes needs at least two classes".into()));
    }
    let take = if c_cor >= classes {
        log::warn!("c_cor = {c_cor} exceeds C - 1 = {}; clamping", classes - 1);
        classes - 1
    } else {
        c_cor
    };
    Ok((0..classes)
        .map(|c| {
            let mut others: Vec<(T, usize)> = (0..classes)
                .filter(|&o| o != c)
                .map(|o| (squared_distance(class_means.row(c), class_means.row(o)), o))
                .collect();
            others.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal).then(a.1.cmp(&b.1)));
            others.into_iter().take(take).map(|(_, o)| o).collect()
        })
        .collect())
}

/// Indices of the `k` largest entries, ties to the lower index.
fn top_indices<T: Scalar>(values: &[T], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(k);
    order
}

/// Excess over the floor of each retained component; zero elsewhere.
fn retained_excess<T: Scalar>(raw: &[T], floor: T, top_k: usize) -> Vec<T> {
    let mut excess = vec![T::zero(); raw.len()];
    for j in top_indices(raw, top_k) {
        if raw[j] > floor {
            excess[j] = raw[j] - floor;
        }
    }
    excess
}

/// Maps a raw GP mean onto the simplex: the `top_k` largest components keep
/// their excess over `floor`, the rest sit at `floor`, and the result is
/// `floor + (1 − C·floor)·excess/Σexcess`. Every entry is at least `floor`
/// and only retained components exceed it. With no positive excess the
/// `top_k` leaders share the remaining mass equally.
pub fn normalize_context<T: Scalar>(raw: &[T], floor: T, top_k: usize) -> Vec<T> {
    let c = raw.len();
    let excess = retained_excess(raw, floor, top_k);
    let total = excess.iter().fold(T::zero(), |a, &x| a + x);
    if !(total > T::zero()) {
        let k = top_k.clamp(1, c);
        let share = (T::one() - floor * T::from_usize_lossy(c - k)) / T::from_usize_lossy(k);
        let mut y = vec![floor; c];
        for j in top_indices(raw, k) {
            y[j] = share;
        }
        return y;
    }
    let spread = T::one() - floor * T::from_usize_lossy(c);
    excess.iter().map(|&w| floor + spread * (w / total)).collect()
}

/// Mass held by the [`TOP_MASS_K`] largest components of the untruncated
/// context label.
pub fn top_mass<T: Scalar>(raw: &[T], floor: T) -> T {
    let full = normalize_context(raw, floor, raw.len());
    top_indices(&full, TOP_MASS_K.min(raw.len()))
        .into_iter()
        .map(|j| full[j])
        .fold(T::zero(), |a, x| a + x)
}

struct SimplexProjectOp<T> {
    /// Per row: excess vector and its total.
    excess: Vec<(Vec<T>, T)>,
    spread: T,
}

impl<T: Scalar> CustomOp<T> for SimplexProjectOp<T> {
    fn name(&self) -> &'static str {
        "context_normalize"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let mut dx = Tensor::zeros(inputs[0].shape().to_vec());
        for (b, (w, total)) in self.excess.iter().enumerate() {
            if !(*total > T::zero()) {
                continue;
            }
            let g = grad.row(b);
            let weighted = g
                .iter()
                .zip(w)
                .fold(T::zero(), |a, (&gi, &wi)| a + gi * wi)
                / *total;
            let k = self.spread / *total;
            for (j, dst) in dx.row_mut(b).iter_mut().enumerate() {
                if w[j] > T::zero() {
                    *dst = k * (g[j] - weighted);
                }
            }
        }
        Ok(vec![Some(dx)])
    }
}

/// Records [`normalize_context`] row-wise on the tape.
pub fn record_normalize_context<T: Scalar>(tape: &mut Tape<T>, raw: Var, floor: T, top_k: usize) -> Result<Var> {
    let rv = tape.value(raw).clone();
    let c = rv.cols();
    let spread = T::one() - floor * T::from_usize_lossy(c);
    let mut excess = Vec::with_capacity(rv.rows());
    let mut data = Vec::with_capacity(rv.len());
    for b in 0..rv.rows() {
        data.extend(normalize_context(rv.row(b), floor, top_k));
        let w = retained_excess(rv.row(b), floor, top_k);
        let total = w.iter().fold(T::zero(), |a, &x| a + x);
        excess.push((w, total));
    }
    let value = Tensor::new(rv.shape().to_vec(), data)?;
    Ok(tape.custom(Box::new(SimplexProjectOp { excess, spread }), &[raw], value))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContextLabel<T> {
    pub y_star: Vec<T>,
    pub variance: T,
    pub raw_mean: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
enum Snapshots<T> {
    Global(GpSnapshot<T>),
    PerClass(Vec<GpSnapshot<T>>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSet<T> {
    spec: AnchorSpec,
    kernel: KernelConfig,
    classes: usize,
    indices: Vec<Vec<usize>>,
    features: Tensor<T>,
    class_means: Tensor<T>,
    neighbors: Vec<Vec<usize>>,
    snapshots: Snapshots<T>,
}

impl<T: Scalar> AnchorSet<T> {
    /// Builds from sampled anchor indices; `extract` maps the flattened
    /// (class-major) index list to an `|A| × d` feature matrix.
    pub fn build<F>(
        indices: Vec<Vec<usize>>,
        spec: AnchorSpec,
        kernel: KernelConfig,
        extract: F,
    ) -> Result<Self>
    where
        F: FnOnce(&[usize]) -> Result<Tensor<T>>,
    {
        let classes = indices.len();
        spec.validate(classes)?;
        if let Some(class) = indices.iter().position(Vec::is_empty) {
            return Err(Error::EmptyClass { class });
        }
        let flat: Vec<usize> = indices.iter().flatten().copied().collect();
        let features = extract(&flat)?;
        let mut set = Self {
            spec,
            kernel,
            classes,
            indices,
            features: Tensor::zeros(vec![0, 0]),
            class_means: Tensor::zeros(vec![0, 0]),
            neighbors: Vec::new(),
            snapshots: Snapshots::PerClass(Vec::new()),
        };
        set.install_features(features)?;
        Ok(set)
    }

    /// Recomputes anchor features with the current extractor and rebuilds
    /// class means, neighbor lists, and GP factors.
    pub fn refresh<F>(&mut self, extract: F) -> Result<()>
    where
        F: FnOnce(&[usize]) -> Result<Tensor<T>>,
    {
        let flat = self.flat_indices();
        let features = extract(&flat)?;
        self.install_features(features)
    }

    fn install_features(&mut self, features: Tensor<T>) -> Result<()> {
        let flat_labels = self.flat_labels();
        if features.rows() != flat_labels.len() {
            return Err(Error::shape(
                "anchor_refresh",
                format!("{} anchors, features {:?}", flat_labels.len(), features.shape()),
            ));
        }
        let d = features.cols();
        let mut means = Tensor::zeros(vec![self.classes, d]);
        for (row, &c) in flat_labels.iter().enumerate() {
            for (m, &x) in means.row_mut(c).iter_mut().zip(features.row(row)) {
                *m = *m + x;
            }
        }
        for (c, members) in self.indices.iter().enumerate() {
            let n = T::from_usize_lossy(members.len());
            means.row_mut(c).iter_mut().for_each(|m| *m = *m / n);
        }
        let (neighbors, snapshots) = match self.spec.c_cor {
            NeighborCount::Count(k) if k < self.classes - 1 => {
                let neighbors = nearest_classes(&means, k)?;
                let snaps = (0..self.classes)
                    .map(|c| {
                        let mut members = vec![c];
                        members.extend(&neighbors[c]);
                        self.restricted_snapshot(&features, &flat_labels, &members)
                    })
                    .collect::<Result<Vec<_>>>()?;
                (neighbors, Snapshots::PerClass(snaps))
            }
            _ => {
                let neighbors = nearest_classes(&means, self.classes - 1)?;
                let snap = GpSnapshot::fit(features.clone(), flat_labels.clone(), self.classes, self.kernel)?;
                (neighbors, Snapshots::Global(snap))
            }
        };
        self.features = features;
        self.class_means = means;
        self.neighbors = neighbors;
        self.snapshots = snapshots;
        Ok(())
    }

    fn restricted_snapshot(&self, features: &Tensor<T>, labels: &[usize], members: &[usize]) -> Result<GpSnapshot<T>> {
        let rows: Vec<usize> = (0..labels.len()).filter(|&r| members.contains(&labels[r])).collect();
        let d = features.cols();
        let data = rows.iter().flat_map(|&r| features.row(r).iter().copied()).collect();
        let sub = Tensor::matrix(rows.len(), d, data)?;
        let sub_labels = rows.iter().map(|&r| labels[r]).collect();
        GpSnapshot::fit(sub, sub_labels, self.classes, self.kernel)
    }

    pub fn spec(&self) -> &AnchorSpec {
        &self.spec
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn indices(&self) -> &[Vec<usize>] {
        &self.indices
    }

    pub fn flat_indices(&self) -> Vec<usize> {
        self.indices.iter().flatten().copied().collect()
    }

    pub fn flat_labels(&self) -> Vec<usize> {
        self.indices
            .iter()
            .enumerate()
            .flat_map(|(c, m)| std::iter::repeat_n(c, m.len()))
            .collect()
    }

    pub fn features(&self) -> &Tensor<T> {
        &self.features
    }

    pub fn class_means(&self) -> &Tensor<T> {
        &self.class_means
    }

    pub fn neighbors(&self) -> &[Vec<usize>] {
        &self.neighbors
    }

    /// The snapshot answering queries for samples of `class`.
    pub fn snapshot_for(&self, class: usize) -> Result<&GpSnapshot<T>> {
        if class >= self.classes {
            return Err(Error::Contract(format!("class {class} out of range")));
        }
        Ok(match &self.snapshots {
            Snapshots::Global(s) => s,
            Snapshots::PerClass(v) => &v[class],
        })
    }

    pub fn snapshot_count(&self) -> usize {
        match &self.snapshots {
            Snapshots::Global(_) => 1,
            Snapshots::PerClass(v) => v.len(),
        }
    }

    pub fn context_label(&self, h: &[T], class: usize) -> Result<ContextLabel<T>> {
        let post = self.snapshot_for(class)?.posterior(h)?;
        let y_star = normalize_context(&post.mean, T::lit(self.spec.floor), self.spec.top_k);
        Ok(ContextLabel {
            y_star,
            variance: post.variance,
            raw_mean: post.mean,
        })
    }

    /// Records differentiable context labels for the rows of `h` (`B × d`).
    /// Returns the `B × C` label node plus per-row labels for diagnostics.
    pub fn record_context_labels(
        &self,
        tape: &mut Tape<T>,
        h: Var,
        classes: &[usize],
    ) -> Result<(Var, Vec<ContextLabel<T>>)> {
        let snaps = classes
            .iter()
            .map(|&c| self.snapshot_for(c))
            .collect::<Result<Vec<_>>>()?;
        let (raw, posteriors) = record_posterior_mean(tape, h, &snaps)?;
        let floor = T::lit(self.spec.floor);
        let y = record_normalize_context(tape, raw, floor, self.spec.top_k)?;
        let yv = tape.value(y);
        let labels = posteriors
            .into_iter()
            .enumerate()
            .map(|(b, p)| ContextLabel {
                y_star: yv.row(b).to_vec(),
                variance: p.variance,
                raw_mean: p.mean,
            })
            .collect();
        Ok((y, labels))
    }

    pub fn to_dump(&self) -> AnchorDump {
        let snapshots = match &self.snapshots {
            Snapshots::Global(s) => vec![s.to_dump()],
            Snapshots::PerClass(v) => v.iter().map(GpSnapshot::to_dump).collect(),
        };
        AnchorDump {
            spec: self.spec,
            indices: self.indices.clone(),
            neighbors: self.neighbors.clone(),
            snapshots,
        }
    }
}

/// Serializable anchor snapshot for `gpgl gp-selftest --dump`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorDump {
    pub spec: AnchorSpec,
    pub indices: Vec<Vec<usize>>,
    pub neighbors: Vec<Vec<usize>>,
    pub snapshots: Vec<SnapshotDump>,
}
