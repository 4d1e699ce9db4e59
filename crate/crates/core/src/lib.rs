//! Two-stage pipeline for asynchronous clinical multimodal prediction:
//! a VAE defines an image latent space, a conditional latent diffusion model
//! generates an up-to-date latent from a stale reference image plus an
//! irregular clinical time series, and a fusion classifier consumes the
//! reference image, the time series and the generated latent.
//!
//! Everything is trainable and verifiable end-to-end on a bundled synthetic
//! asynchronous-patient world; real cohorts plug in through the on-disk
//! format documented in [`dataset`].

pub mod ckpt;
pub mod config;
pub mod dataset;
pub mod diffusion;
pub mod ehr_encoder;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod nn;
pub mod opt;
pub mod parallel;
pub mod pipeline;
pub mod predictor;
pub mod seed;
pub mod synthworld;
pub mod tensor;
pub mod vae;

pub use error::{Error, Result};
