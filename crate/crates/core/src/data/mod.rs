//! Datasets, experiment configuration and metrics files.

mod config;
mod csv_io;
mod dataset;
mod metrics;
mod synth;

pub use config::{reference_profile, DatasetSource, ExperimentConfig, SplitConfig, PRESETS, PRESET_RATE_SCALE};
pub use csv_io::{load_csv, write_csv};
pub use dataset::{Dataset, Splits};
pub use metrics::{read_metrics, write_metrics, MetricsRecord, MetricsWriter, ModeSummary, RunSummary};
pub use synth::{class_means, gen_blobs, gen_interleaved, spiral_point, BlobsSpec, SpiralSpec};
