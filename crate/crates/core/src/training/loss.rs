//! Rate and importance-weighted distortion terms of the training objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::gaussian::LIKELIHOOD_BOUND;
use crate::nn::{CustomOp, Tensor};

/// Per-voxel distortion weights `exp(a * I)`; masked voxels get weight 0.
pub fn distortion_weights(importance: &[f64], mask: Option<&[bool]>, a: f64) -> Vec<f64> {
    importance
        .iter()
        .enumerate()
        .map(|(i, &imp)| match mask {
            Some(m) if !m[i] => 0.0,
            _ => (a * imp).exp(),
        })
        .collect()
}

fn check_lengths(
    x: &[f64],
    x_tilde: &[f64],
    importance: &[f64],
    mask: Option<&[bool]>,
) -> Result<()> {
    for n in [
        x_tilde.len(),
        importance.len(),
        mask.map_or(x.len(), <[bool]>::len),
    ] {
        if n != x.len() {
            return Err(Error::shape(&[x.len()], &[n]));
        }
    }
    Ok(())
}

/// `sum_i w_i (x_i - x~_i)^2` with `w_i = exp(a I_i)`.
pub fn distortion_loss(
    x: &[f64],
    x_tilde: &[f64],
    importance: &[f64],
    mask: Option<&[bool]>,
    a: f64,
) -> Result<f64> {
    check_lengths(x, x_tilde, importance, mask)?;
    let w = distortion_weights(importance, mask, a);
    Ok(x.iter()
        .zip(x_tilde)
        .zip(&w)
        .map(|((p, q), w)| w * (p - q) * (p - q))
        .sum())
}

/// Gradient of [`distortion_loss`] with respect to the reconstruction.
pub fn distortion_grad(
    x: &[f64],
    x_tilde: &[f64],
    importance: &[f64],
    mask: Option<&[bool]>,
    a: f64,
) -> Result<Vec<f64>> {
    check_lengths(x, x_tilde, importance, mask)?;
    let w = distortion_weights(importance, mask, a);
    Ok(x.iter()
        .zip(x_tilde)
        .zip(&w)
        .map(|((p, q), w)| -2.0 * w * (p - q))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RateLoss {
    pub bits: f64,
    /// Likelihoods that were at or below the floor and got clamped.
    pub clamped: usize,
}

/// Total `-log2 p` over all symbol likelihoods, latent and hyper-latent alike.
pub fn rate_loss(likelihoods: &[f64]) -> RateLoss {
    let mut out = RateLoss::default();
    for &p in likelihoods {
        let p = if p.is_nan() || p <= LIKELIHOOD_BOUND {
            out.clamped += 1;
            LIKELIHOOD_BOUND
        } else {
            p.min(1.0)
        };
        out.bits -= p.log2();
    }
    if out.clamped > 0 {
        log::warn!("{} likelihoods clamped to {LIKELIHOOD_BOUND}", out.clamped);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub rate: f64,
    pub distortion: f64,
}

impl LossParts {
    pub fn combine(rate: f64, distortion: f64, lambda: f64) -> Result<Self> {
        let total = rate + lambda * distortion;
        if !total.is_finite() {
            return Err(Error::Diverged {
                epoch: 0,
                reason: format!("non-finite loss: rate {rate}, distortion {distortion}"),
            });
        }
        Ok(LossParts {
            total,
            rate,
            distortion,
        })
    }
}

/// `L_R + lambda * L_D`.
pub fn total_loss(
    x: &[f64],
    x_tilde: &[f64],
    likelihoods: &[f64],
    importance: &[f64],
    mask: Option<&[bool]>,
    lambda: f64,
    a: f64,
) -> Result<LossParts> {
    let d = distortion_loss(x, x_tilde, importance, mask, a)?;
    LossParts::combine(rate_loss(likelihoods).bits, d, lambda)
}

/// Gradient of [`total_loss`] with respect to the reconstruction. The rate
/// term does not depend on `x~` once the likelihoods are fixed.
pub fn total_loss_grad(
    x: &[f64],
    x_tilde: &[f64],
    importance: &[f64],
    mask: Option<&[bool]>,
    lambda: f64,
    a: f64,
) -> Result<Vec<f64>> {
    Ok(distortion_grad(x, x_tilde, importance, mask, a)?
        .into_iter()
        .map(|g| lambda * g)
        .collect())
}

/// Graph node computing `sum w (x - x~)^2` for a fixed target and weights.
/// Input: `[x~]`. Output: `[1]`.
pub struct WeightedSse {
    pub target: Vec<f32>,
    pub weights: Vec<f32>,
}

impl CustomOp for WeightedSse {
    fn forward(&self, inputs: &[&Tensor]) -> Tensor {
        let s: f64 = inputs[0]
            .data
            .iter()
            .zip(&self.target)
            .zip(&self.weights)
            .map(|((&q, &p), &w)| w as f64 * ((p - q) as f64).powi(2))
            .sum();
        Tensor::scalar(s as f32)
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let g = grad.data[0];
        let data = inputs[0]
            .data
            .iter()
            .zip(&self.target)
            .zip(&self.weights)
            .map(|((&q, &p), &w)| -2.0 * g * w * (p - q))
            .collect();
        vec![Some(Tensor {
            shape: inputs[0].shape.clone(),
            data,
        })]
    }
}
