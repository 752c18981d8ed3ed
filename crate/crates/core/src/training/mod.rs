//! Rate-distortion training of the conditioned autoencoder.

mod loss;
mod optim;
mod train;

pub use loss::{
    distortion_grad, distortion_loss, distortion_weights, rate_loss, total_loss, total_loss_grad,
    LossParts, RateLoss, WeightedSse,
};
pub use optim::Adam;
pub use train::{block_weights, evaluate, train, EpochStats, TrainConfig, TrainReport};
