//! Numeric core for enhancing extremely noisy low-light raw images.
//!
//! The crate is `no_std` (with `alloc`) and has no IO: it hosts the pure
//! computation behind the `darklift` tool.
//!
//! - [`tensor`] — minimal N-dimensional tensors with reverse-mode autodiff,
//!   the substrate for every trainable module.
//! - [`isp`] — deterministic Bayer-raw preprocessing: packing, linearization,
//!   digital gain, white balance, binning demosaic, color correction, gamma.
//! - [`synth`] — physically motivated Poisson + Gaussian sensor noise
//!   synthesis for paired training data.
//! - [`vae`] — content-preservation VAE with encoder-to-decoder residual
//!   connections.
//! - [`attention`] — global and region-based cross-attention.
//! - [`unet`] — the denoising U-Net, its context processor, and timestep
//!   embeddings.
//! - [`diffusion`] — noise schedules, forward/reverse processes, training
//!   losses, classifier-free guidance, ancestral and DDIM samplers.
//! - [`train`] — two-stage training orchestration.
//! - [`metrics`] — PSNR and SSIM.
//!
//! All floating-point transcendentals go through `libm`, so results are
//! bit-reproducible across platforms for a fixed seed.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod attention;
pub mod diffusion;
mod error;
pub mod isp;
pub mod layers;
pub mod metrics;
mod num;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod unet;
pub mod vae;

pub use error::{Error, Result};
