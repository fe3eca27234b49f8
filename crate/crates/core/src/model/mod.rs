//! Network, optimizer and training loop.

mod net;
mod optim;
mod train;

pub use net::{argmax, Architecture, ForwardVars, Model, ModelConfig, ModelSpec, ParamInfo};
pub use optim::{sgd_momentum_step, OptimizerConfig, SgdMomentum};
pub use train::{
    anchor_spread, anchor_spread_ratio, epochs_to_threshold, error_rate, evaluate, run_experiment, stream_rng, stream_seed, train_run,
    EpochStats, ExperimentResult, GpglConfig, Mode, MuPolicy, RunHistory, Stream, Threshold, TrainConfig, Trainer,
};

#[cfg(test)]
mod tests;
