//! Prompt-pool continual learning that decides, task by task, whether to grow
//! a new prompt set or reuse an old one under gradient projection.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! at the bottom of this file pin the common instantiations.

// `!(x > 0)` is used on purpose so that NaN fails positivity checks.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod lw2g;
pub mod metrics;
pub mod model;
pub mod pool;
pub mod scalar;
pub mod snapshot;
pub mod subspace;
pub mod taskstream;
pub mod trace;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Encoder32 = model::Encoder<f32>;
pub type Encoder64 = model::Encoder<f64>;
pub type PromptPool32 = pool::PromptPool<f32>;
pub type PromptPool64 = pool::PromptPool<f64>;
pub type Learner32 = trainer::Learner<f32>;
pub type Learner64 = trainer::Learner<f64>;
pub type Basis32 = subspace::Basis<f32>;
pub type Basis64 = subspace::Basis<f64>;
