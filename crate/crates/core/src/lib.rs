//! Importance-driven latent representations for volumetric scalar fields.
//!
//! Volumes are cut into padded blocks, each block is encoded by a 3D
//! convolutional autoencoder whose features are modulated by an importance
//! map, and the quantized latents are entropy coded with a learned
//! hyperprior. The [`analysis`] module works directly on the latents.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod blocking;
pub mod codec;
pub mod error;
pub mod importance;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod training;
pub mod volume;

pub use error::{Error, Result};
