//! GP-guided training of small neural classifiers.
//!
//! A Gaussian process fitted on the features of a per-class anchor set gives
//! every training sample a *context label*; a three-term consistency loss
//! ties the network prediction, the context label and the ground truth
//! together. Everything is generic over the scalar type ([`Scalar`]), with
//! `f64` aliases below.

pub mod anchor;
pub mod cli;
pub mod data;
pub mod diffcore;
pub mod error;
pub mod gp;
pub mod losses;
pub mod model;
pub mod scalar;
pub mod selfcheck;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = diffcore::Tensor<f64>;
pub type Tensor32 = diffcore::Tensor<f32>;
pub type Tape64 = diffcore::Tape<f64>;
pub type GpSnapshot64 = gp::GpSnapshot<f64>;
pub type GpSnapshot32 = gp::GpSnapshot<f32>;
pub type AnchorSet64 = anchor::AnchorSet<f64>;
pub type Model64 = model::Model<f64>;
pub type Model32 = model::Model<f32>;
pub type Dataset64 = data::Dataset<f64>;
pub type Splits64 = data::Splits<f64>;
