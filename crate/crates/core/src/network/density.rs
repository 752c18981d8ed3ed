//! Learned non-parametric density for the hyper-latent, one per channel.
//!
//! Each channel owns a monotone cumulative function built from a small chain
//! of 1→3→3→3→1 affine maps with softplus-positive matrices and tanh gates.
//! The probability of symbol `k` is `c(k + 1/2) - c(k - 1/2)`.

use rand::Rng;

use crate::nn::{CustomOp, ParamGroup, ParamStore, Tensor};

use super::gaussian::LIKELIHOOD_BOUND;

const WIDTHS: [usize; 5] = [1, 3, 3, 3, 1];
const LAYERS: usize = 4;
const INIT_SCALE: f64 = 10.0;

pub const PARAM_NAMES: [&str; 11] = [
    "density.m0",
    "density.m1",
    "density.m2",
    "density.m3",
    "density.b0",
    "density.b1",
    "density.b2",
    "density.b3",
    "density.f0",
    "density.f1",
    "density.f2",
];

/// Registers the density parameters for `channels` channels.
pub fn init_params(store: &mut ParamStore, channels: usize, rng: &mut impl Rng) {
    let scale = INIT_SCALE.powf(1.0 / LAYERS as f64);
    for l in 0..LAYERS {
        let (n_in, n_out) = (WIDTHS[l], WIDTHS[l + 1]);
        let init = ((1.0 / scale / n_out as f64).exp_m1()).ln() as f32;
        store.push(
            PARAM_NAMES[l],
            Tensor::full(&[channels, n_out, n_in], init),
            ParamGroup::Entropy,
        );
    }
    for l in 0..LAYERS {
        let n_out = WIDTHS[l + 1];
        let data = (0..channels * n_out)
            .map(|_| rng.gen_range(-0.5f32..0.5))
            .collect();
        store.push(
            PARAM_NAMES[LAYERS + l],
            Tensor::new(vec![channels, n_out], data).unwrap(),
            ParamGroup::Entropy,
        );
    }
    for l in 0..LAYERS - 1 {
        store.push(
            PARAM_NAMES[2 * LAYERS + l],
            Tensor::zeros(&[channels, WIDTHS[l + 1]]),
            ParamGroup::Entropy,
        );
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Borrowed view of the 11 density tensors.
pub struct Density<'a> {
    t: [&'a Tensor; 11],
}

/// Per-tensor gradient accumulators matching [`Density`].
pub struct DensityGrads {
    pub t: [Vec<f64>; 11],
}

impl DensityGrads {
    fn new(d: &Density) -> Self {
        DensityGrads {
            t: std::array::from_fn(|i| vec![0.0; d.t[i].len()]),
        }
    }
}

struct Trace {
    h: [[f64; 3]; 4],
    a: [[f64; 3]; 4],
}

impl<'a> Density<'a> {
    pub fn new(tensors: [&'a Tensor; 11]) -> Self {
        Density { t: tensors }
    }

    pub fn from_store(store: &'a ParamStore) -> Self {
        Density {
            t: PARAM_NAMES.map(|n| &store.tensors[store.index_of(n).expect("density parameters")]),
        }
    }

    pub fn channels(&self) -> usize {
        self.t[0].shape[0]
    }

    #[inline]
    fn m(&self, l: usize, c: usize, i: usize, j: usize) -> f64 {
        let (n_out, n_in) = (WIDTHS[l + 1], WIDTHS[l]);
        self.t[l].data[(c * n_out + i) * n_in + j] as f64
    }

    #[inline]
    fn b(&self, l: usize, c: usize, i: usize) -> f64 {
        self.t[LAYERS + l].data[c * WIDTHS[l + 1] + i] as f64
    }

    #[inline]
    fn f(&self, l: usize, c: usize, i: usize) -> f64 {
        self.t[2 * LAYERS + l].data[c * WIDTHS[l + 1] + i] as f64
    }

    fn trace(&self, c: usize, x: f64) -> (f64, Trace) {
        let mut tr = Trace {
            h: [[0.0; 3]; 4],
            a: [[0.0; 3]; 4],
        };
        tr.h[0][0] = x;
        for l in 0..LAYERS {
            let (n_in, n_out) = (WIDTHS[l], WIDTHS[l + 1]);
            for i in 0..n_out {
                let mut s = self.b(l, c, i);
                for j in 0..n_in {
                    s += softplus(self.m(l, c, i, j)) * tr.h[l][j];
                }
                tr.a[l][i] = s;
            }
            if l + 1 < LAYERS {
                for i in 0..n_out {
                    let a = tr.a[l][i];
                    tr.h[l + 1][i] = a + self.f(l, c, i).tanh() * a.tanh();
                }
            }
        }
        (tr.a[LAYERS - 1][0], tr)
    }

    /// Logit of the cumulative function of channel `c` at `x`.
    pub fn logit(&self, c: usize, x: f64) -> f64 {
        self.trace(c, x).0
    }

    pub fn cdf(&self, c: usize, x: f64) -> f64 {
        sigmoid(self.logit(c, x))
    }

    /// Back-propagates `g = dL/dlogit` and returns `dL/dx`.
    #[allow(clippy::needless_range_loop)]
    fn logit_backward(&self, c: usize, x: f64, g: f64, grads: &mut DensityGrads) -> f64 {
        let (_, tr) = self.trace(c, x);
        let mut da = [0.0f64; 3];
        da[0] = g;
        for l in (0..LAYERS).rev() {
            let (n_in, n_out) = (WIDTHS[l], WIDTHS[l + 1]);
            if l + 1 < LAYERS {
                // da currently holds dL/dh_{l+1}
                for i in 0..n_out {
                    let a = tr.a[l][i];
                    let tf = self.f(l, c, i).tanh();
                    let ta = a.tanh();
                    let dh = da[i];
                    grads.t[2 * LAYERS + l][c * n_out + i] += dh * ta * (1.0 - tf * tf);
                    da[i] = dh * (1.0 + tf * (1.0 - ta * ta));
                }
            }
            let mut dh = [0.0f64; 3];
            for i in 0..n_out {
                grads.t[LAYERS + l][c * n_out + i] += da[i];
                for j in 0..n_in {
                    let m = self.m(l, c, i, j);
                    grads.t[l][(c * n_out + i) * n_in + j] += da[i] * tr.h[l][j] * sigmoid(m);
                    dh[j] += softplus(m) * da[i];
                }
            }
            da = dh;
        }
        da[0]
    }

    /// Mass of the unit bin around `x`, computed on the side of the
    /// distribution where the sigmoid difference is best conditioned.
    pub fn likelihood(&self, c: usize, x: f64) -> f64 {
        let lower = self.logit(c, x - 0.5);
        let upper = self.logit(c, x + 0.5);
        let s = if lower + upper > 0.0 { -1.0 } else { 1.0 };
        (sigmoid(s * upper) - sigmoid(s * lower)).abs()
    }

    /// Returns `(p, dp/dx)` and accumulates `g * dp/dparam` into `grads`.
    fn likelihood_backward(
        &self,
        c: usize,
        x: f64,
        g: f64,
        grads: &mut DensityGrads,
    ) -> (f64, f64) {
        let lower = self.logit(c, x - 0.5);
        let upper = self.logit(c, x + 0.5);
        let s = if lower + upper > 0.0 { -1.0 } else { 1.0 };
        let (su, sl) = (sigmoid(s * upper), sigmoid(s * lower));
        let d = su - sl;
        let sign = if d >= 0.0 { 1.0 } else { -1.0 };
        let dp_du = sign * s * su * (1.0 - su);
        let dp_dl = -sign * s * sl * (1.0 - sl);
        let dx_u = self.logit_backward(c, x + 0.5, g * dp_du, grads);
        let dx_l = self.logit_backward(c, x - 0.5, g * dp_dl, grads);
        (d.abs(), if g != 0.0 { (dx_u + dx_l) / g } else { 0.0 })
    }

    pub fn pmf(&self, c: usize, lo: i32, hi: i32) -> Vec<f64> {
        (lo..=hi).map(|k| self.likelihood(c, k as f64)).collect()
    }
}

/// Sum of `-log2 p(z)` where element `i` of `z` belongs to channel `i % C`.
/// Inputs: `[z, density tensors...]` in [`PARAM_NAMES`] order.
pub struct FactorizedBits;

impl CustomOp for FactorizedBits {
    fn forward(&self, inputs: &[&Tensor]) -> Tensor {
        let d = Density::new(std::array::from_fn(|i| inputs[i + 1]));
        let c = d.channels();
        let bits: f64 = inputs[0]
            .data
            .iter()
            .enumerate()
            .map(|(i, &z)| -d.likelihood(i % c, z as f64).max(LIKELIHOOD_BOUND).log2())
            .sum();
        Tensor::scalar(bits as f32)
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let d = Density::new(std::array::from_fn(|i| inputs[i + 1]));
        let c = d.channels();
        let g = grad.data[0] as f64;
        let z = inputs[0];
        let mut grads = DensityGrads::new(&d);
        let mut dz = vec![0.0f32; z.len()];
        for (i, &zv) in z.data.iter().enumerate() {
            let p = d.likelihood(i % c, zv as f64);
            if p <= LIKELIHOOD_BOUND {
                continue;
            }
            let coef = -g / (p * std::f64::consts::LN_2);
            let (_, dp_dx) = d.likelihood_backward(i % c, zv as f64, coef, &mut grads);
            dz[i] = (coef * dp_dx) as f32;
        }
        let mut out = vec![Some(Tensor {
            shape: z.shape.clone(),
            data: dz,
        })];
        for (k, gk) in grads.t.into_iter().enumerate() {
            out.push(Some(Tensor {
                shape: inputs[k + 1].shape.clone(),
                data: gk.into_iter().map(|v| v as f32).collect(),
            }));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store(channels: usize, seed: u64) -> ParamStore {
        let mut s = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_params(&mut s, channels, &mut rng);
        // perturb so the factors and matrices are not at their symmetric init
        for t in s.tensors.iter_mut() {
            for v in t.data.iter_mut() {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
        s
    }

    #[test]
    fn cdf_is_monotone_and_pmf_normalizes() {
        let s = store(3, 1);
        let d = Density::from_store(&s);
        for c in 0..3 {
            let mut prev = 0.0;
            for i in -200..200 {
                let v = d.cdf(c, i as f64 * 0.25);
                assert!(v >= prev - 1e-12);
                prev = v;
            }
            let total: f64 = d.pmf(c, -4000, 4000).iter().sum();
            assert!((total - 1.0).abs() < 1e-6, "{total}");
            let clipped: f64 = d.pmf(c, -127, 127).iter().sum();
            assert!(clipped <= total && clipped > 0.999, "{clipped}");
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let s = store(2, 2);
        let zs = [0.3f32, -1.2, 2.6, 0.0];
        let bits = |s: &ParamStore, z: &[f32]| -> f64 {
            let d = Density::from_store(s);
            z.iter()
                .enumerate()
                .map(|(i, &v)| -d.likelihood(i % 2, v as f64).log2())
                .sum()
        };
        let d = Density::from_store(&s);
        let mut inputs: Vec<&Tensor> = Vec::new();
        let zt = Tensor::new(vec![4], zs.to_vec()).unwrap();
        inputs.push(&zt);
        inputs.extend(d.t.iter().copied());
        let out = FactorizedBits.forward(&inputs);
        assert!((out.data[0] as f64 - bits(&s, &zs)).abs() < 1e-4);
        let grads = FactorizedBits.backward(&inputs, &out, &Tensor::scalar(1.0));

        let eps = 1e-3f32;
        for i in 0..4 {
            let mut zp = zs;
            zp[i] += eps;
            let mut zm = zs;
            zm[i] -= eps;
            let fd = (bits(&s, &zp) - bits(&s, &zm)) / (2.0 * eps as f64);
            let an = grads[0].as_ref().unwrap().data[i] as f64;
            assert!(
                (fd - an).abs() < 1e-2 * fd.abs().max(1.0),
                "dz[{i}] {fd} vs {an}"
            );
        }
        for k in 0..11 {
            for idx in [0usize, 1] {
                if idx >= s.tensors[k].len() {
                    continue;
                }
                let mut sp = s.clone();
                sp.tensors[k].data[idx] += eps;
                let mut sm = s.clone();
                sm.tensors[k].data[idx] -= eps;
                let fd = (bits(&sp, &zs) - bits(&sm, &zs)) / (2.0 * eps as f64);
                let an = grads[k + 1].as_ref().unwrap().data[idx] as f64;
                assert!(
                    (fd - an).abs() < 2e-2 * fd.abs().max(1.0),
                    "{} [{idx}] {fd} vs {an}",
                    PARAM_NAMES[k]
                );
            }
        }
    }
}
