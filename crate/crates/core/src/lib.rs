//! Gradual pruning of small transformer encoders.
//!
//! The crate bundles a minimal reverse-mode autodiff engine ([`tensor`]), a
//! post-norm transformer classifier with component-tagged parameters
//! ([`model`]), parameter/FLOP accounting ([`accounting`]), magnitude and
//! diagonal-Fisher pruners with scope policies ([`pruning`]), sparsity and
//! learning-rate schedules ([`schedules`]), a distillation loss
//! ([`distill`]), a synthetic classification task ([`task`]), the training
//! loops ([`train`]) and sweep drivers ([`experiments`]).
//!
//! Everything numeric is generic over [`Scalar`]; the aliases below fix the
//! two supported precisions.

pub mod accounting;
pub mod distill;
pub mod error;
pub mod experiments;
pub mod model;
pub mod pruning;
mod scalar;
pub mod schedules;
pub mod task;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::{Precision, Scalar};

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Graph32 = tensor::Graph<f32>;
pub type Graph64 = tensor::Graph<f64>;
pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
pub type Teacher32 = distill::Teacher<f32>;
pub type Teacher64 = distill::Teacher<f64>;
