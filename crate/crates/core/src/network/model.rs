//! SFT-conditioned convolutional autoencoder with a hyperprior.
//!
//! Encoder stages are stride-`s` 3D convolutions whose outputs are modulated
//! by `F * alpha + beta`, where `(alpha, beta)` come from a condition network
//! that reads the importance map and downsamples in lockstep. The decoder is
//! modulated the same way, but its conditions are computed from the quantized
//! latent itself, so decoding never needs the importance map.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocking::BlockSpec;
use crate::error::{Error, Result};
use crate::nn::{ConvGeometry, Graph, Padding, ParamGroup, ParamStore, Tensor, Var};
use crate::volume::NormalizationParams;

use super::density::{self, Density};
use super::gaussian::SCALE_BOUND;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderLayer {
    pub channels: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu { slope: f32 },
}

impl Activation {
    fn slope(self) -> f32 {
        match self {
            Activation::Relu => 0.0,
            Activation::LeakyRelu { slope } => slope,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Latent channels `K`; equals the channel count of the last encoder layer.
    pub latent_channels: usize,
    pub enc_layers: Vec<EncoderLayer>,
    /// Edge of the padded input block.
    pub padded_edge: usize,
    pub cond_channels: usize,
    /// Length of the hyper-latent `z`.
    pub hyper_channels: usize,
    pub hyper_hidden: usize,
    pub activation: Activation,
    pub seed: u64,
}

impl Default for ModelConfig {
    /// 24³ padded blocks, three stride-2 stages down to an `8 x 3 x 3 x 3` latent.
    fn default() -> Self {
        ModelConfig {
            latent_channels: 8,
            enc_layers: vec![
                EncoderLayer {
                    channels: 32,
                    stride: 2,
                },
                EncoderLayer {
                    channels: 64,
                    stride: 2,
                },
                EncoderLayer {
                    channels: 8,
                    stride: 2,
                },
            ],
            padded_edge: 24,
            cond_channels: 16,
            hyper_channels: 16,
            hyper_hidden: 64,
            activation: Activation::LeakyRelu { slope: 0.1 },
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Small configuration for 12³ padded blocks (content 8, pad 2): two
    /// stride-2 stages down to `K x 3 x 3 x 3`.
    pub fn desk(latent_channels: usize) -> Self {
        ModelConfig {
            latent_channels,
            enc_layers: vec![
                EncoderLayer {
                    channels: 16,
                    stride: 2,
                },
                EncoderLayer {
                    channels: latent_channels,
                    stride: 2,
                },
            ],
            padded_edge: 12,
            cond_channels: 8,
            hyper_channels: 8,
            hyper_hidden: 32,
            activation: Activation::LeakyRelu { slope: 0.1 },
            seed: 0,
        }
    }

    pub fn total_stride(&self) -> usize {
        self.enc_layers.iter().map(|l| l.stride).product()
    }

    pub fn latent_spatial(&self) -> usize {
        self.padded_edge / self.total_stride()
    }

    pub fn latent_shape(&self) -> [usize; 4] {
        let s = self.latent_spatial();
        [self.latent_channels, s, s, s]
    }

    pub fn latent_len(&self) -> usize {
        self.latent_shape().iter().product()
    }

    pub fn block_shape(&self) -> [usize; 4] {
        let e = self.padded_edge;
        [1, e, e, e]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.enc_layers.is_empty() {
            return bad("encoder needs at least one layer".into());
        }
        if self.latent_channels == 0
            || self.enc_layers.last().unwrap().channels != self.latent_channels
        {
            return bad(format!(
                "last encoder layer must have {} channels",
                self.latent_channels
            ));
        }
        if self
            .enc_layers
            .iter()
            .any(|l| l.stride == 0 || l.channels == 0)
        {
            return bad("encoder strides and channels must be positive".into());
        }
        if !self.padded_edge.is_multiple_of(self.total_stride()) || self.latent_spatial() == 0 {
            return bad(format!(
                "stride product {} does not divide padded edge {}",
                self.total_stride(),
                self.padded_edge
            ));
        }
        if self.hyper_channels == 0 || self.hyper_hidden == 0 || self.cond_channels == 0 {
            return bad("hyper and condition widths must be positive".into());
        }
        Ok(())
    }

    /// Per-stage decoder output channels: the encoder schedule mirrored.
    fn decoder_channels(&self) -> Vec<usize> {
        let n = self.enc_layers.len();
        (0..n)
            .map(|j| {
                if j + 1 < n {
                    self.enc_layers[n - 2 - j].channels
                } else {
                    self.enc_layers[0].channels
                }
            })
            .collect()
    }

    fn decoder_strides(&self) -> Vec<usize> {
        self.enc_layers.iter().rev().map(|l| l.stride).collect()
    }
}

/// Affine modulation parameters for one feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct SftParams {
    pub alpha: Tensor,
    pub beta: Tensor,
}

/// `F * alpha + beta`, elementwise.
pub fn sft_apply(features: &Tensor, p: &SftParams) -> Result<Tensor> {
    features.ensure_shape(&p.alpha.shape)?;
    features.ensure_shape(&p.beta.shape)?;
    let data = features
        .data
        .iter()
        .zip(&p.alpha.data)
        .zip(&p.beta.data)
        .map(|((f, a), b)| f * a + b)
        .collect();
    Ok(Tensor {
        shape: features.shape.clone(),
        data,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantMode {
    /// Additive uniform noise in `[-1/2, 1/2)`.
    Train,
    /// Rounding, half away from zero.
    Eval,
}

pub fn relax_quantize(y: &Tensor, mode: QuantMode, rng: &mut impl Rng) -> Tensor {
    match mode {
        QuantMode::Train => Tensor {
            shape: y.shape.clone(),
            data: y
                .data
                .iter()
                .map(|&v| v + rng.gen_range(-0.5f32..0.5))
                .collect(),
        },
        QuantMode::Eval => quantize(y),
    }
}

/// Rounds half away from zero.
pub fn quantize(y: &Tensor) -> Tensor {
    Tensor {
        shape: y.shape.clone(),
        data: y.data.iter().map(|v| v.round()).collect(),
    }
}

const K3: usize = 3;

fn geom(kernel: usize, stride: usize) -> ConvGeometry {
    ConvGeometry {
        kernel,
        stride,
        pad: kernel / 2,
        padding: Padding::Replicate,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub block_spec: BlockSpec,
    pub params: ParamStore,
    /// Normalization of the data the model was trained on.
    pub normalization: Option<NormalizationParams>,
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Init<'_> {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, gain: f32, bias: f32) {
        let fan_in = (cin * k * k * k) as f32;
        let bound = gain * (3.0 / fan_in).sqrt();
        let w = (0..cout * cin * k * k * k)
            .map(|_| self.rng.gen_range(-bound..bound))
            .collect();
        self.store.push(
            format!("{name}.w"),
            Tensor::new(vec![cout, cin, k, k, k], w).unwrap(),
            ParamGroup::Main,
        );
        self.store.push(
            format!("{name}.b"),
            Tensor::full(&[cout], bias),
            ParamGroup::Main,
        );
    }

    fn dense(&mut self, name: &str, n_in: usize, n_out: usize, gain: f32, bias: f32) {
        let bound = gain * (3.0 / n_in as f32).sqrt();
        let w = (0..n_out * n_in)
            .map(|_| self.rng.gen_range(-bound..bound))
            .collect();
        self.store.push(
            format!("{name}.w"),
            Tensor::new(vec![n_out, n_in], w).unwrap(),
            ParamGroup::Main,
        );
        self.store.push(
            format!("{name}.b"),
            Tensor::full(&[n_out], bias),
            ParamGroup::Main,
        );
    }
}

impl Model {
    /// Randomly initialized model, deterministic in `config.seed`.
    pub fn new(config: ModelConfig, block_spec: BlockSpec) -> Result<Self> {
        config.validate()?;
        block_spec.validate()?;
        if block_spec.padded() != config.padded_edge {
            return Err(Error::InvalidArgument(format!(
                "block spec padded edge {} does not match model input edge {}",
                block_spec.padded(),
                config.padded_edge
            )));
        }
        let mut store = ParamStore::default();
        let mut init = Init {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        };
        let he = std::f32::consts::SQRT_2;
        let c = config.cond_channels;
        let mut prev = 1;
        let mut prev_cond = 1;
        for (i, layer) in config.enc_layers.iter().enumerate() {
            init.conv(&format!("enc.{i}"), prev, layer.channels, K3, he, 0.0);
            init.conv(&format!("cond.{i}"), prev_cond, c, K3, he, 0.0);
            init.conv(&format!("cond.{i}.alpha"), c, layer.channels, 1, 0.3, 1.0);
            init.conv(&format!("cond.{i}.beta"), c, layer.channels, 1, 0.3, 0.0);
            prev = layer.channels;
            prev_cond = c;
        }
        let k = config.latent_channels;
        init.conv("tg.0", k, c, K3, he, 0.0);
        init.conv("tg.1", c, c, K3, he, 0.0);
        let mut prev = k;
        for (j, ch) in config.decoder_channels().into_iter().enumerate() {
            init.conv(&format!("dec.{j}"), prev, ch, K3, he, 0.0);
            init.conv(&format!("tg.{j}.alpha"), c, ch, 1, 0.3, 1.0);
            init.conv(&format!("tg.{j}.beta"), c, ch, 1, 0.3, 0.0);
            prev = ch;
        }
        init.conv("dec.out", prev, 1, K3, 1.0, 0.5);
        let latent = config.latent_len();
        init.dense("ha.0", latent, config.hyper_hidden, he, 0.0);
        init.dense("ha.1", config.hyper_hidden, config.hyper_channels, 1.0, 0.0);
        init.dense("hs.0", config.hyper_channels, config.hyper_hidden, he, 0.0);
        init.dense("hs.1", config.hyper_hidden, 2 * latent, 0.3, 0.0);
        // raw scales start near softplus(2) ~ 2.1
        let hs1b = store.index_of("hs.1.b").unwrap();
        for v in store.tensors[hs1b].data[latent..].iter_mut() {
            *v = 2.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
        density::init_params(&mut store, config.hyper_channels, &mut rng);
        Ok(Model {
            config,
            block_spec,
            params: store,
            normalization: None,
        })
    }

    pub fn density(&self) -> Density<'_> {
        Density::from_store(&self.params)
    }

    fn act(&self, g: &mut Graph, x: Var) -> Var {
        g.leaky_relu(x, self.config.activation.slope())
    }

    fn conv_named(&self, g: &mut Graph, x: Var, name: &str, kernel: usize, stride: usize) -> Var {
        let w = g.param_named(&format!("{name}.w"));
        let b = g.param_named(&format!("{name}.b"));
        g.conv(x, w, b, geom(kernel, stride))
    }

    fn dense_named(&self, g: &mut Graph, x: Var, name: &str) -> Var {
        let w = g.param_named(&format!("{name}.w"));
        let b = g.param_named(&format!("{name}.b"));
        g.dense(x, w, b)
    }

    /// Condition network of the encoder: one `(alpha, beta)` per stage.
    pub(crate) fn condition_graph(&self, g: &mut Graph, importance: Var) -> Vec<(Var, Var)> {
        let mut h = importance;
        let mut out = Vec::with_capacity(self.config.enc_layers.len());
        for (i, layer) in self.config.enc_layers.iter().enumerate() {
            h = self.conv_named(g, h, &format!("cond.{i}"), K3, layer.stride);
            h = self.act(g, h);
            let alpha = self.conv_named(g, h, &format!("cond.{i}.alpha"), 1, 1);
            let beta = self.conv_named(g, h, &format!("cond.{i}.beta"), 1, 1);
            out.push((alpha, beta));
        }
        out
    }

    pub(crate) fn encoder_graph(&self, g: &mut Graph, x: Var, importance: Var) -> Var {
        let sft = self.condition_graph(g, importance);
        let n = self.config.enc_layers.len();
        let mut h = x;
        for (i, layer) in self.config.enc_layers.iter().enumerate() {
            h = self.conv_named(g, h, &format!("enc.{i}"), K3, layer.stride);
            let (alpha, beta) = sft[i];
            h = g.mul(h, alpha);
            h = g.add(h, beta);
            if i + 1 < n {
                h = self.act(g, h);
            }
        }
        h
    }

    /// Decoder-side condition network; reads only the latent.
    pub(crate) fn decoder_condition_graph(&self, g: &mut Graph, latent: Var) -> Vec<(Var, Var)> {
        let mut t = self.conv_named(g, latent, "tg.0", K3, 1);
        t = self.act(g, t);
        t = self.conv_named(g, t, "tg.1", K3, 1);
        t = self.act(g, t);
        let mut factor = 1;
        let mut out = Vec::new();
        for (j, stride) in self.config.decoder_strides().into_iter().enumerate() {
            factor *= stride;
            let up = g.upsample(t, factor);
            let alpha = self.conv_named(g, up, &format!("tg.{j}.alpha"), 1, 1);
            let beta = self.conv_named(g, up, &format!("tg.{j}.beta"), 1, 1);
            out.push((alpha, beta));
        }
        out
    }

    pub(crate) fn decoder_graph(&self, g: &mut Graph, latent: Var) -> Var {
        let sft = self.decoder_condition_graph(g, latent);
        let mut h = latent;
        for (j, stride) in self.config.decoder_strides().into_iter().enumerate() {
            h = g.upsample(h, stride);
            h = self.conv_named(g, h, &format!("dec.{j}"), K3, 1);
            let (alpha, beta) = sft[j];
            h = g.mul(h, alpha);
            h = g.add(h, beta);
            h = self.act(g, h);
        }
        self.conv_named(g, h, "dec.out", K3, 1)
    }

    pub(crate) fn hyper_analysis_graph(&self, g: &mut Graph, latent: Var) -> Var {
        let h = self.dense_named(g, latent, "ha.0");
        let h = self.act(g, h);
        self.dense_named(g, h, "ha.1")
    }

    /// Returns `(means, scales)`, each shaped like the latent.
    pub(crate) fn hyper_synthesis_graph(&self, g: &mut Graph, z: Var) -> (Var, Var) {
        let h = self.dense_named(g, z, "hs.0");
        let h = self.act(g, h);
        let out = self.dense_named(g, h, "hs.1");
        let shape = self.config.latent_shape();
        let mean = g.slice(out, 0, &shape);
        let raw = g.slice(out, self.config.latent_len(), &shape);
        (mean, g.softplus(raw))
    }

    fn block_tensor(&self, values: &[f64]) -> Result<Tensor> {
        let shape = self.config.block_shape();
        let n: usize = shape.iter().product();
        if values.len() != n {
            return Err(Error::shape(&shape, &[values.len()]));
        }
        Tensor::from_f64(&shape, values)
    }

    pub fn encode_condition(&self, importance: &[f64]) -> Result<Vec<SftParams>> {
        let imp = self.block_tensor(importance)?;
        let mut g = Graph::new(&self.params);
        let iv = g.input(imp);
        let sft = self.condition_graph(&mut g, iv);
        Ok(sft
            .into_iter()
            .map(|(a, b)| SftParams {
                alpha: g.value(a).clone(),
                beta: g.value(b).clone(),
            })
            .collect())
    }

    /// Continuous latent `y` of a padded block under an importance sub-map.
    pub fn encode(&self, values: &[f64], importance: &[f64]) -> Result<Tensor> {
        let x = self.block_tensor(values)?;
        let imp = self.block_tensor(importance)?;
        let mut g = Graph::new(&self.params);
        let (xv, iv) = (g.input(x), g.input(imp));
        let y = self.encoder_graph(&mut g, xv, iv);
        Ok(g.value(y).clone())
    }

    pub fn hyper_encode(&self, latent: &Tensor) -> Result<Tensor> {
        latent.ensure_shape(&self.config.latent_shape())?;
        let mut g = Graph::new(&self.params);
        let y = g.input(latent.clone());
        let z = self.hyper_analysis_graph(&mut g, y);
        Ok(g.value(z).clone())
    }

    /// Per-element Gaussian `(means, scales)` for the latent, from the
    /// quantized hyper-latent. Scales are at least [`SCALE_BOUND`].
    pub fn entropy_params(&self, z_hat: &Tensor) -> Result<(Tensor, Tensor)> {
        if z_hat.len() != self.config.hyper_channels {
            return Err(Error::shape(&[self.config.hyper_channels], &z_hat.shape));
        }
        let mut g = Graph::new(&self.params);
        let z = g.input(z_hat.clone());
        let (m, s) = self.hyper_synthesis_graph(&mut g, z);
        let mut scales = g.value(s).clone();
        for v in scales.data.iter_mut() {
            *v = v.max(SCALE_BOUND as f32);
        }
        Ok((g.value(m).clone(), scales))
    }

    /// Reconstructs a padded block from a (quantized) latent.
    pub fn decode(&self, latent: &Tensor) -> Result<Tensor> {
        latent.ensure_shape(&self.config.latent_shape())?;
        let mut g = Graph::new(&self.params);
        let y = g.input(latent.clone());
        let x = self.decoder_graph(&mut g, y);
        Ok(g.value(x).clone())
    }
}
