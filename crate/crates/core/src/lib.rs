//! Frozen-section slide pipeline at desk scale: synthetic slides, tissue
//! segmentation and tiling, a LoRA-adapted transformer patch encoder with
//! self-distillation pretraining, attention-based multiple-instance
//! aggregation, evaluation statistics and score-threshold triage.
//!
//! The numeric code is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the production precision.

pub mod error;
pub mod jsonio;
pub mod mil;
pub mod nncore;
pub mod preprocess;
pub mod scalar;
pub mod stats;
pub mod synthwsi;
pub mod triage;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Production tensor precision.
pub type Tensor = nncore::Tensor<f32>;
pub type Tape = nncore::Tape<f32>;
pub type Encoder = nncore::Encoder<f32>;
pub type ParamSet = nncore::ParamSet<f32>;
