//! The conditioned autoencoder, its hyperprior, and checkpoint I/O.

mod checkpoint;
pub mod density;
pub mod gaussian;
mod model;

pub use checkpoint::{hex, ModelHash};
pub use model::{
    quantize, relax_quantize, sft_apply, Activation, EncoderLayer, Model, ModelConfig, QuantMode,
    SftParams,
};
