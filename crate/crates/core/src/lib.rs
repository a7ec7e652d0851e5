//! Variable-length 1D video autoencoder with a pixel-space flow-matching decoder.
//!
//! The crate is organized around the main pipeline stages:
//!
//! - [`synthdata`]: deterministic synthetic video corpora and pixel preprocessing
//! - [`motion`]: motion-aware token budget estimation with online EMA statistics
//! - [`encoder`]: query-based ViT encoder producing hybrid (structural + 1D) latents
//! - [`latent_policy`]: matryoshka tail dropout and condition-mode sampling
//! - [`flow`]: flow-matching schedule, timestep sampling, Euler ODE sampling
//! - [`decoder`]: pixel-space diffusion transformer (velocity prediction)
//! - [`losses`]: flow-matching, perceptual proxy, KL, REPA, self-alignment losses
//! - [`trainer`]: two-stage training recipe, fine-tuning phases, checkpointing
//! - [`latentgen`]: class-conditional latent flow model over the hybrid latent space
//! - [`metrics`]: PSNR / SSIM / Fréchet-style metrics and latent statistics
//! - [`latentfile`]: the bit-exact variable-length latent container format
//!
//! Numerics are built on a small tape-based autodiff engine ([`graph`]) over dense
//! tensors ([`tensor`]), generic over `f32` (training) and `f64` (reference mode).

pub mod decoder;
pub mod encoder;
pub mod error;
pub mod flow;
pub mod graph;
pub mod latent_policy;
pub mod latentfile;
pub mod latentgen;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod motion;
pub mod rng;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

pub use error::CoreError;
pub use tensor::{Real, Tensor};
