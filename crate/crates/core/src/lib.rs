//! Two-stage graph-language alignment: domain-reweighted graph-text
//! contrastive pretraining of a multi-scale message-passing encoder, then
//! curriculum-weighted tuning of a projector against a frozen scoring head.
//!
//! The numeric kernels are generic over [`numcore::Scalar`]; the training
//! pipelines and file formats work in `f64`. The aliases below name the
//! concrete types used throughout.

pub mod align;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod graphdata;
pub mod numcore;
pub mod persist;
pub mod pretrain;
pub mod seeding;
pub mod synthgen;

pub use error::{Error, Result};

/// Double-precision matrix, the pipeline's working type.
pub type Matrix64 = numcore::Matrix<f64>;
pub type Matrix32 = numcore::Matrix<f32>;
pub type ParamSet64 = numcore::ParamSet<f64>;
pub type Optimizer64 = numcore::OptimizerState<f64>;
pub type Encoder64 = encoder::MultiScaleEncoder<f64>;
