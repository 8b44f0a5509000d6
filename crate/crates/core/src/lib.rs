//! Apprenticeship learning for subject-driven diffusion on a synthetic
//! subject world.
//!
//! Per-subject expert denoisers are fine-tuned from a shared base model,
//! sample pseudo-targets for unseen prompts, are gated by a contrastive
//! alignment score, and their outputs are distilled into one apprentice
//! denoiser that conditions on demonstration pairs at inference time.
//!
//! The numerical core is generic over [`Scalar`]; training and sampling
//! run in `f32`, gradient checks in `f64`.

pub mod autodiff;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod experts;
pub mod formats;
pub mod model;
pub mod optim;
pub mod orchestrator;
pub mod pretrain;
pub mod rng;
pub mod scalar;
pub mod scorer;
pub mod tensor;
pub mod world;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// An image in `[-1, 1]`, shaped `[H, W, 3]`, in pipeline precision.
pub type Image = Tensor<f32>;

/// Denoiser parameters in pipeline precision.
pub type Params = model::ParameterSet<f32>;

/// Noise schedule in pipeline precision.
pub type Schedule = diffusion::NoiseSchedule<f32>;

pub use scorer::Embedder;
