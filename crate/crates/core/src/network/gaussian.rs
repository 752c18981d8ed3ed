//! Per-element Gaussian conditional model for the main latent.
//!
//! The probability of integer symbol `k` under `N(mean, scale)` is the mass of
//! the unit bin around it: `Phi((k + 1/2 - mean) / scale) - Phi((k - 1/2 - mean) / scale)`.

use statrs::function::erf::erfc;

use crate::nn::{CustomOp, Tensor};

pub const SCALE_BOUND: f64 = 1e-6;
pub const LIKELIHOOD_BOUND: f64 = 1e-9;

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[inline]
pub fn std_normal_cdf(t: f64) -> f64 {
    0.5 * erfc(-t / SQRT_2)
}

#[inline]
fn std_normal_pdf(t: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * t * t).exp()
}

/// Bin mass of `value` (possibly non-integer, as in noisy training) under
/// `N(mean, scale)`, evaluated on the lower tail for accuracy.
pub fn likelihood(value: f64, mean: f64, scale: f64) -> f64 {
    let scale = scale.max(SCALE_BOUND);
    let v = (value - mean).abs();
    std_normal_cdf((0.5 - v) / scale) - std_normal_cdf((-0.5 - v) / scale)
}

/// Likelihood plus its partial derivatives with respect to value, mean and
/// scale. The scale derivative is zero where the lower bound is active.
fn likelihood_with_grad(value: f64, mean: f64, scale: f64) -> (f64, f64, f64, f64) {
    let bounded = scale < SCALE_BOUND;
    let s = scale.max(SCALE_BOUND);
    let diff = value - mean;
    let v = diff.abs();
    let sign = if diff >= 0.0 { 1.0 } else { -1.0 };
    let a = (0.5 - v) / s;
    let b = (-0.5 - v) / s;
    let p = std_normal_cdf(a) - std_normal_cdf(b);
    let (pa, pb) = (std_normal_pdf(a), std_normal_pdf(b));
    let dp_dv = (pb - pa) / s;
    let dp_ds = if bounded { 0.0 } else { (b * pb - a * pa) / s };
    (p, dp_dv * sign, -dp_dv * sign, dp_ds)
}

/// Probability mass function over the integer alphabet `[lo, hi]`.
pub fn pmf(mean: f64, scale: f64, lo: i32, hi: i32) -> Vec<f64> {
    (lo..=hi)
        .map(|k| likelihood(k as f64, mean, scale))
        .collect()
}

/// Sum of `-log2 p` over all elements, with gradients for value, mean and
/// scale. Inputs: `[values, means, scales]`, equal lengths. Output: `[1]`.
pub struct GaussianBits;

impl CustomOp for GaussianBits {
    fn forward(&self, inputs: &[&Tensor]) -> Tensor {
        let (y, m, s) = (inputs[0], inputs[1], inputs[2]);
        let bits: f64 = y
            .data
            .iter()
            .zip(&m.data)
            .zip(&s.data)
            .map(|((&y, &m), &s)| {
                -likelihood(y as f64, m as f64, s as f64)
                    .max(LIKELIHOOD_BOUND)
                    .log2()
            })
            .sum();
        Tensor::scalar(bits as f32)
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (y, m, s) = (inputs[0], inputs[1], inputs[2]);
        let g = grad.data[0] as f64;
        let n = y.len();
        let mut dy = vec![0.0f32; n];
        let mut dm = vec![0.0f32; n];
        let mut ds = vec![0.0f32; n];
        for i in 0..n {
            let (p, pv, pm, ps) =
                likelihood_with_grad(y.data[i] as f64, m.data[i] as f64, s.data[i] as f64);
            if p <= LIKELIHOOD_BOUND {
                continue;
            }
            // d(-log2 p) = -dp / (p ln 2)
            let c = -g / (p * std::f64::consts::LN_2);
            dy[i] = (c * pv) as f32;
            dm[i] = (c * pm) as f32;
            ds[i] = (c * ps) as f32;
        }
        vec![
            Some(Tensor {
                shape: y.shape.clone(),
                data: dy,
            }),
            Some(Tensor {
                shape: m.shape.clone(),
                data: dm,
            }),
            Some(Tensor {
                shape: s.shape.clone(),
                data: ds,
            }),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Composite Simpson integration of the Gaussian density over the bin.
    fn quadrature(k: f64, mean: f64, scale: f64) -> f64 {
        let (a, b) = (k - 0.5, k + 0.5);
        let n = 2000;
        let h = (b - a) / n as f64;
        let f = |x: f64| {
            (-(x - mean).powi(2) / (2.0 * scale * scale)).exp()
                / (scale * (2.0 * std::f64::consts::PI).sqrt())
        };
        let mut s = f(a) + f(b);
        for i in 1..n {
            let x = a + i as f64 * h;
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x);
        }
        s * h / 3.0
    }

    #[test]
    fn matches_quadrature() {
        for &(k, mean, scale) in &[
            (0.0, 0.0, 1.0),
            (2.0, 0.3, 0.7),
            (-3.0, 1.2, 2.5),
            (5.0, -1.0, 4.0),
        ] {
            let p = likelihood(k, mean, scale);
            assert!(
                (p - quadrature(k, mean, scale)).abs() < 1e-8,
                "{k} {mean} {scale}"
            );
        }
    }

    #[test]
    fn pmf_sums_to_one_over_six_sigma() {
        for &(mean, scale) in &[(0.0f64, 1.0f64), (3.7, 2.0), (-10.2, 5.0), (0.4, 0.05)] {
            let lo = (mean - 6.0 * scale).floor() as i32 - 1;
            let hi = (mean + 6.0 * scale).ceil() as i32 + 1;
            let total: f64 = pmf(mean, scale, lo, hi).iter().sum();
            assert!((1.0 - 1e-6..=1.0 + 1e-12).contains(&total), "{total}");
        }
    }

    #[test]
    fn wide_scale_flattens() {
        let narrow = -likelihood(0.0, 0.0, 1.0).log2();
        let wide = -likelihood(0.0, 0.0, 100.0).log2();
        assert!(wide > narrow);
        let p = pmf(0.0, 1e4, -5, 5);
        let spread = p.iter().cloned().fold(0.0, f64::max) - p.iter().cloned().fold(1.0, f64::min);
        assert!(spread < 1e-8);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let eps = 1e-6;
        for &(y, m, s) in &[(0.3, 0.0, 1.0), (-1.7, 0.4, 0.8), (2.2, 2.0, 3.0)] {
            let (_, pv, pm, ps) = likelihood_with_grad(y, m, s);
            let fd_v = (likelihood(y + eps, m, s) - likelihood(y - eps, m, s)) / (2.0 * eps);
            let fd_m = (likelihood(y, m + eps, s) - likelihood(y, m - eps, s)) / (2.0 * eps);
            let fd_s = (likelihood(y, m, s + eps) - likelihood(y, m, s - eps)) / (2.0 * eps);
            assert!((pv - fd_v).abs() < 1e-6);
            assert!((pm - fd_m).abs() < 1e-6);
            assert!((ps - fd_s).abs() < 1e-6);
        }
    }
}
