//! CORD: weighted on-policy cross-modal self-distillation at desk scale.
//!
//! A single autoregressive policy conditions on either of two synthetic
//! modalities ("text" and noisy "audio" encodings of the same arithmetic
//! program). The text-conditioned side acts as an in-model teacher; training
//! aligns the audio-conditioned behavior to it with a weighted on-policy
//! reverse-KL objective plus a judge-rewarded GRPO objective, against SFT and
//! forward-KL baselines.
//!
//! Core math is generic over the scalar type: `f32` for training, `f64` for
//! gradient checks and oracle tests.

pub mod analysis;
pub mod baseline;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod rollout;
pub mod scalar;
pub mod seeding;
pub mod seq_align;
pub mod tape;
pub mod tensor;
pub mod token_align;
pub mod trainer;

pub use error::{CordError, Result};
pub use scalar::Scalar;

/// Default training precision.
pub type TrainScalar = f32;
/// Precision used by gradient checks and oracle tests.
pub type CheckScalar = f64;

/// Concrete aliases for the two supported precisions.
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Model32 = model::ModelParams<f32>;
pub type Model64 = model::ModelParams<f64>;
