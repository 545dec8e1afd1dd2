//! Masked autoencoder pre-training for tactile images.
//!
//! The numeric core ([`tensor`], [`graph`], [`patching`], [`masking`],
//! [`model`], [`optim`]) is generic over [`Scalar`] (`f32` or `f64`). The
//! data, training and evaluation pipeline runs in `f64`; the aliases below
//! name those concrete instantiations.

pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod image;
pub mod masking;
pub mod model;
pub mod optim;
pub mod patching;
pub mod scalar;
pub mod seed;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Scalar used by the training pipeline.
pub type Real = f64;
pub type Tensor = tensor::Tensor<Real>;
pub type Graph = graph::Graph<Real>;
pub type PatchGrid = patching::PatchGrid<Real>;
pub type TactileImage = image::TactileImage<Real>;
pub type ModelParams = model::ModelParams<Real>;
pub type AdamState = optim::AdamState<Real>;

pub type Tensor32 = tensor::Tensor<f32>;
pub type ModelParams32 = model::ModelParams<f32>;
