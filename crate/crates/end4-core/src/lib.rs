//! End-to-end denoising-diffusion detector for inpainting forgeries.
//!
//! The pipeline couples a one-step denoising reconstruction network with a
//! scale-aware pyramid fusion classifier and trains both jointly: the
//! reconstruction branch predicts the noise added by the forward diffusion
//! process, the detection branch compares the original image against its
//! one-step reconstruction and emits a real-vs-inpainted probability.
//!
//! The crate also ships the tooling needed to exercise the detector at desk
//! scale: benchmark construction over five mask-placement subsets with a
//! pluggable inpainting backend, test-time perturbations, and ACC/AUC
//! evaluation with penultimate-feature export.

pub mod denoiser;
pub mod detector;
pub mod diffusion;
pub mod error;
pub mod loss;
pub mod model;
pub mod optim;
pub mod nn;
pub mod par;
pub mod real;
pub mod seeding;
pub mod tape;

pub use error::{Error, Result};
pub use real::Real;
