//! Photographic style classification with a parameter-free saliency column fused
//! with an RGB column.
//!
//! The numeric core is generic over [`scalar::Real`] (`f32` or `f64`); the aliases
//! below name the common instantiations.

// `!(x > 0)` is used on purpose so that NaN takes the rejecting branch.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod evaluation;
pub mod manifest;
pub mod model;
pub mod pipeline;
pub mod saliency;
pub mod scalar;
pub mod seed;
pub mod training;
pub mod transforms;

pub use scalar::{Precision, Real};

pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
pub type Checkpoint32 = model::Checkpoint<f32>;
pub type Checkpoint64 = model::Checkpoint<f64>;
pub type SaliencyMap32 = saliency::SaliencyMap<f32>;
pub type SaliencyMap64 = saliency::SaliencyMap<f64>;
pub type ImageGrid32 = transforms::ImageGrid<f32>;
pub type ImageGrid64 = transforms::ImageGrid<f64>;
