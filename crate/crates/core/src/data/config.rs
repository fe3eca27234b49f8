//! Experiment configuration as TOML. Every key is written back explicitly.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::csv_io::load_csv;
use super::dataset::{Dataset, Splits};
use super::synth::{gen_blobs, gen_interleaved, BlobsSpec, SpiralSpec};
use crate::anchor::{AnchorSpec, NeighborCount, TOP_MASS_K};
use crate::error::{Error, Result};
use crate::gp::KernelConfig;
use crate::model::{stream_rng, stream_seed, GpglConfig, Mode, ModelConfig, OptimizerConfig, Stream, Threshold, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetSource {
    Blobs(BlobsSpec),
    Spiral(SpiralSpec),
    Csv {
        path: PathBuf,
        has_header: bool,
        /// Empty for flat vectors, else `[channels, height, width]`.
        input_shape: Vec<usize>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub val_fraction: f64,
    /// Zero-mean, unit-variance features using train-split moments.
    pub standardize: bool,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            val_fraction: 0.1,
            standardize: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root seed; every random stream derives from it.
    pub seed: u64,
    /// Number of consecutive seeds `compare` runs, starting at `seed`.
    pub seeds: usize,
    pub mode: Mode,
    pub out_dir: PathBuf,
    pub threshold: Threshold,
    pub dataset: DatasetSource,
    pub split: SplitConfig,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub kernel: KernelConfig,
    pub anchors: AnchorSpec,
    pub gpgl: GpglConfig,
}

/// Settings of the original large-scale runs, kept for reference. The
/// desk-scale presets below use much smaller models and data.
pub mod reference_profile {
    pub const LENGTH_SCALE: [f64; 3] = [200.0, 70.0, 70.0];
    pub const ANCHOR_BUDGET: [usize; 3] = [128, 7000, 14000];
    pub const EPOCHS: [usize; 3] = [250, 200, 120];
    pub const CLASSES: [usize; 3] = [10, 100, 200];
}

pub const PRESETS: [&str; 3] = ["blobs10", "spiral2", "blobs3-fast"];

/// Presets run the default step schedule at a fifth of its rates. At the
/// full 0.1 start the small MLPs reach their plateau within one or two
/// epochs and the gpgl mode can diverge.
pub const PRESET_RATE_SCALE: f64 = 0.2;

fn source_classes(source: &DatasetSource) -> usize {
    match source {
        DatasetSource::Blobs(b) => b.classes,
        DatasetSource::Spiral(s) => s.classes,
        DatasetSource::Csv { .. } => TOP_MASS_K,
    }
}

impl ExperimentConfig {
    /// Built-in configurations that need no external data.
    pub fn preset(name: &str) -> Result<Self> {
        let base = |dataset: DatasetSource, epochs, batch_size, length_scale, per_class_count| ExperimentConfig {
            anchors: AnchorSpec {
                per_class_count,
                c_cor: NeighborCount::All,
                top_k: TOP_MASS_K.min(source_classes(&dataset)),
                ..AnchorSpec::default()
            },
            seed: 0,
            seeds: 5,
            mode: Mode::Gpgl,
            out_dir: PathBuf::from("runs").join(name),
            threshold: Threshold::default(),
            dataset,
            split: SplitConfig::default(),
            model: ModelConfig::default(),
            optimizer: OptimizerConfig {
                epochs,
                batch_size,
                ..OptimizerConfig::default()
            }
            .with_rate_scale(PRESET_RATE_SCALE),
            kernel: KernelConfig::default().with_length_scale(length_scale),
            gpgl: GpglConfig::default(),
        };
        let cfg = match name {
            "blobs10" => base(
                DatasetSource::Blobs(BlobsSpec {
                    classes: 10,
                    per_class: 200,
                    dim: 8,
                    separation: 4.0,
                    noise: 1.0,
                }),
                50,
                64,
                10.0,
                AnchorSpec::per_class_from_budget(reference_profile::ANCHOR_BUDGET[0], 10),
            ),
            "spiral2" => base(
                DatasetSource::Spiral(SpiralSpec {
                    classes: 2,
                    per_class: 200,
                    noise: 0.03,
                    turns: 2.0,
                }),
                100,
                32,
                10.0,
                12,
            ),
            "blobs3-fast" => base(
                DatasetSource::Blobs(BlobsSpec {
                    classes: 3,
                    per_class: 60,
                    dim: 4,
                    separation: 3.0,
                    noise: 1.0,
                }),
                5,
                16,
                10.0,
                8,
            ),
            other => {
                return Err(Error::Config(format!(
                    "unknown preset {other:?}; expected one of {}",
                    PRESETS.join(", ")
                )))
            }
        };
        Ok(cfg)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn classes(&self) -> Option<usize> {
        match &self.dataset {
            DatasetSource::Csv { .. } => None,
            other => Some(source_classes(other)),
        }
    }

    /// Checks everything that does not need the data.
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.kernel.validate()?;
        if let Some(c) = self.classes() {
            self.train_config().validate(c)?;
        }
        if self.seeds == 0 {
            return Err(Error::Config("seeds must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.split.val_fraction) || self.split.val_fraction == 0.0 {
            return Err(Error::Config(format!(
                "val_fraction must be in (0, 1), got {}",
                self.split.val_fraction
            )));
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            model: self.model.clone(),
            optimizer: self.optimizer.clone(),
            kernel: self.kernel,
            anchors: self.anchors,
            gpgl: self.gpgl,
        }
    }

    /// Generates or loads the data for `seed`, splits off the validation
    /// set and standardizes if configured.
    pub fn load_splits(&self, seed: u64) -> Result<Splits<f64>> {
        let data = match &self.dataset {
            DatasetSource::Blobs(spec) => gen_blobs(spec, stream_seed(seed, Stream::Data))?,
            DatasetSource::Spiral(spec) => gen_interleaved(spec, stream_seed(seed, Stream::Data))?,
            DatasetSource::Csv {
                path,
                has_header,
                input_shape,
            } => {
                let mut ds = load_csv(path, *has_header)?;
                if !input_shape.is_empty() {
                    ds = Dataset::new(ds.inputs, ds.labels, ds.classes, input_shape.clone())?;
                }
                ds
            }
        };
        let mut splits = data.split_holdout(self.split.val_fraction, &mut stream_rng(seed, Stream::Split))?;
        if splits.val.is_empty() {
            return Err(Error::Config("validation split is empty".into()));
        }
        if self.split.standardize {
            splits.standardize();
        }
        Ok(splits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::MuPolicy;

    #[test]
    fn presets_round_trip_through_toml() {
        for name in PRESETS {
            let cfg = ExperimentConfig::preset(name).unwrap();
            cfg.validate().unwrap();
            let text = cfg.to_toml_string().unwrap();
            assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg, "{name}:\n{text}");
        }
    }

    #[test]
    fn non_default_values_round_trip() {
        let mut cfg = ExperimentConfig::preset("blobs3-fast").unwrap();
        cfg.anchors.c_cor = NeighborCount::Count(1);
        cfg.gpgl.mu = MuPolicy::Pinned(1.0);
        cfg.threshold = Threshold::Fixed(0.125);
        cfg.kernel = cfg.kernel.with_noise(0.1 + 0.2);
        cfg.dataset = DatasetSource::Csv {
            path: "data/x.csv".into(),
            has_header: true,
            input_shape: vec![1, 4, 4],
        };
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg, "{text}");
    }

    #[test]
    fn unknown_and_missing_keys_are_rejected() {
        let text = ExperimentConfig::preset("blobs3-fast").unwrap().to_toml_string().unwrap();
        let extra = format!("bogus = 1\n{text}");
        assert!(ExperimentConfig::from_toml_str(&extra).is_err());
        let missing = text.replace("seeds = 5\n", "");
        assert!(ExperimentConfig::from_toml_str(&missing).is_err());
    }

    #[test]
    fn negative_noise_fails_validation() {
        let mut cfg = ExperimentConfig::preset("blobs3-fast").unwrap();
        cfg.kernel.noise_variance = -1.0;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn splits_are_disjoint_and_seeded() {
        let cfg = ExperimentConfig::preset("blobs3-fast").unwrap();
        let a = cfg.load_splits(4).unwrap();
        assert_eq!(a, cfg.load_splits(4).unwrap());
        assert_eq!(a.train.len() + a.val.len(), 180);
        assert_eq!(a.val.len(), 18);
        let mean0: f64 = (0..a.train.len()).map(|i| a.train.inputs.row(i)[0]).sum::<f64>() / a.train.len() as f64;
        assert!(mean0.abs() < 1e-12);
    }

    #[test]
    fn missing_csv_is_an_error() {
        let mut cfg = ExperimentConfig::preset("blobs3-fast").unwrap();
        cfg.dataset = DatasetSource::Csv {
            path: "/nonexistent/data.csv".into(),
            has_header: false,
            input_shape: vec![],
        };
        assert!(matches!(cfg.load_splits(0), Err(Error::Io(_))));
    }
}
