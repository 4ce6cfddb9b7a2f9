//! Weight-regularized fine-tuning for composed retrieval at desk scale.
//!
//! A small reverse-mode engine ([`diffcore`]) drives a toy fusion model
//! ([`model`]) trained with a query-to-target contrastive objective
//! ([`loss`]). The [`trainer`] wraps each mini-batch update with a
//! norm-constrained adversarial weight perturbation ([`perturb`]), and
//! [`evalkit`] measures retrieval recall, generalization gaps, sharpness and
//! loss-landscape slices on synthetic data from [`synthcir`].
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below pin the `f64` instantiation used by experiments.

pub mod diffcore;
pub mod error;
pub mod evalkit;
pub mod experiment;
pub mod loss;
pub mod model;
pub mod objective;
pub mod optim;
pub mod params;
pub mod perturb;
pub mod scalar;
pub mod selfcheck;
pub mod synthcir;
pub mod tensor;
pub mod trainer;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
pub use params::{GradientSet, Layer, ParameterSet};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Params64 = ParameterSet<f64>;
pub type Params32 = ParameterSet<f32>;
pub type Grads64 = GradientSet<f64>;
pub type Grads32 = GradientSet<f32>;
pub type Perturbation64 = perturb::Perturbation<f64>;
pub type Perturbation32 = perturb::Perturbation<f32>;
