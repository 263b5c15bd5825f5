//! Training-free subject-driven generation on a toy rectified-flow MM-DiT.
//!
//! A reference image's keys and values are captured along a noised
//! trajectory (with the noise schedule shifted towards low noise) and shared
//! into a small set of transformer layers while a target image is sampled.
//! Background reference tokens are masked out, reference and prompt keys are
//! rescaled, and a short subject caption from a vision-language model can be
//! appended to the prompt.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the crate root pin the common instantiations.

pub mod attention;
pub mod caption;
pub mod model;
pub mod pipeline;
pub mod scalar;
pub mod schedule;
pub mod selftest;
pub mod tensor;

pub use attention::{LayerKV, LayerStrategy, MaskMode, ShareSpec, TokenMask};
pub use caption::{CaptionBundle, CaptionClients, CaptionMode, ChatBackend, HttpBackend, MockBackend};
pub use model::{AttentionBank, ModelConfig, ToyMMDiT};
pub use pipeline::{GenerationConfig, GenerationRequest, GenerationResult, Metadata, PipelineError};
pub use scalar::Scalar;
pub use schedule::{NoiseSchedule, ShiftParams, Trajectory};

/// Scalar used by the command-line pipeline.
pub type Real = f32;

pub type Model32 = ToyMMDiT<f32>;
pub type Model64 = ToyMMDiT<f64>;
pub type Schedule32 = NoiseSchedule<f32>;
pub type Schedule64 = NoiseSchedule<f64>;
pub type Bank32 = AttentionBank<f32>;
pub type Bank64 = AttentionBank<f64>;
pub type Result32 = GenerationResult<f32>;
