//! Continual prompt tuning for dialog state tracking.
//!
//! A small encoder-decoder transformer is pre-trained on span corruption,
//! frozen, and then steered per task by a learned soft prompt. Tasks
//! arrive one after another; completed prompts are banked so earlier tasks
//! are never overwritten, while initialization, query fusion and memory
//! replay carry knowledge forward and gradient-gated retraining carries it
//! backward.

// `!(x > 0.0)` also rejects NaN, which is the point.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod codec;
pub mod metrics;
pub mod model;
pub mod runner;
pub mod scalar;
pub mod stream;
pub mod transfer;

pub use scalar::Scalar;

pub type Tensor64 = autodiff::Tensor<f64>;
pub type ParamGroup64 = autodiff::ParamGroup<f64>;
pub type Backbone64 = model::Backbone<f64>;
pub type SoftPrompt64 = model::SoftPrompt<f64>;
