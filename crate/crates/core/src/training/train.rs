use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blocking::{BlockSpec, DataBlock};
use crate::error::{Error, Result};
use crate::importance::{synth_training_map, ImportanceMap, TrainingMapKind};
use crate::network::density::{FactorizedBits, PARAM_NAMES};
use crate::network::gaussian::{self, GaussianBits, LIKELIHOOD_BOUND};
use crate::network::{density::Density, quantize, relax_quantize, Model, QuantMode};
use crate::nn::{Graph, Tensor};
use crate::volume::{Dims, Volume};

use super::loss::{distortion_weights, LossParts, WeightedSse};
use super::optim::Adam;

fn default_lambda() -> f64 {
    0.01
}
fn default_a() -> f64 {
    3.0
}
fn default_lr_main() -> f64 {
    1e-4
}
fn default_lr_entropy() -> f64 {
    1e-3
}
fn default_epochs() -> usize {
    50
}
fn default_batch() -> usize {
    8
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Exponent of the distortion weights `exp(a * I)`.
    #[serde(default = "default_a")]
    pub a: f64,
    #[serde(default = "default_lr_main")]
    pub lr_main: f64,
    #[serde(default = "default_lr_entropy")]
    pub lr_entropy: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    /// Use each block's own importance instead of drawing a fresh synthetic
    /// map per block and epoch.
    #[serde(default)]
    pub fixed_importance: bool,
    /// Divide each block's loss by its mean distortion weight before
    /// back-propagation. A block's own rate/distortion balance is unchanged,
    /// but low-importance blocks are no longer drowned out in the shared
    /// optimizer state by blocks whose weights are `exp(a)` times larger.
    #[serde(default = "default_true")]
    pub balance_blocks: bool,
    #[serde(default)]
    pub checkpoint_dir: Option<PathBuf>,
    #[serde(default)]
    pub log_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lambda > 0.0
            && self.lr_main > 0.0
            && self.lr_entropy > 0.0
            && self.epochs >= 1
            && self.batch_size >= 1
            && self.a.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "invalid training config: {self:?}"
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Means over the epoch's blocks.
    pub loss: f64,
    pub rate: f64,
    pub distortion: f64,
    /// Median per-block loss.
    pub median_loss: f64,
    pub wall_time: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut x =
        seed ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    x ^= x >> 31;
    x = x.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x ^ (x >> 29)
}

/// Distortion weights over a padded block: `exp(a I)` inside the in-domain
/// content region, zero on padding and on masked voxels.
pub fn block_weights(block: &DataBlock, importance: &[f64], spec: &BlockSpec, a: f64) -> Vec<f64> {
    let e = spec.padded();
    let mut w = distortion_weights(importance, block.valid.as_deref(), a);
    for (n, wn) in w.iter_mut().enumerate() {
        let c = [n % e, (n / e) % e, n / (e * e)];
        let inside =
            (0..3).all(|ax| c[ax] >= spec.pad && c[ax] < spec.pad + block.valid_extent[ax]);
        if !inside {
            *wn = 0.0;
        }
    }
    w
}

/// Blocks per axis of the virtual domain that synthetic maps are drawn over.
const MAP_CONTEXT: usize = 4;

/// Draws a synthetic map for one block. Spatial kinds are generated over a
/// virtual domain several blocks wide and cropped at a random offset, so a
/// block sees anything from a nearly constant level to a sharp transition;
/// the gradient kind is computed from the block's own values.
fn training_importance(block: &DataBlock, spec: &BlockSpec, seed: u64) -> Result<Vec<f64>> {
    let e = spec.padded();
    let dims = Dims::cube(e);
    let vol = Volume::with_mask(dims, block.values.clone(), block.valid.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kind = TrainingMapKind::ALL[rng.gen_range(0..TrainingMapKind::ALL.len())];
    if kind == TrainingMapKind::Gradient {
        return Ok(synth_training_map(dims, kind, rng.gen(), Some(&vol))?.values);
    }
    let n = (MAP_CONTEXT * spec.content).max(e);
    let domain = Dims::cube(n);
    let map = synth_training_map(domain, kind, rng.gen(), None)?;
    let off: [usize; 3] = std::array::from_fn(|_| rng.gen_range(0..=n - e));
    let mut out = Vec::with_capacity(e * e * e);
    for z in 0..e {
        for y in 0..e {
            for x in 0..e {
                let i = domain.index(off[0] + x, off[1] + y, off[2] + z);
                out.push(map.values[i]);
            }
        }
    }
    Ok(ImportanceMap::new(dims, out)?.masked_by(&vol).values)
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

/// One forward and backward pass with noise-relaxed quantization.
fn sample_step(
    model: &Model,
    block: &DataBlock,
    importance: &[f64],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(LossParts, Vec<Tensor>)> {
    let spec = &model.block_spec;
    let shape = model.config.block_shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph::new(&model.params);
    let x = g.input(Tensor::from_f64(&shape, &block.values)?);
    let imp = g.input(Tensor::from_f64(&shape, importance)?);
    let y = model.encoder_graph(&mut g, x, imp);
    let z = model.hyper_analysis_graph(&mut g, y);

    let y_val = g.value(y).clone();
    let y_noisy = relax_quantize(&y_val, QuantMode::Train, &mut rng);
    let u_y = g.input(Tensor {
        shape: y_val.shape.clone(),
        data: y_noisy
            .data
            .iter()
            .zip(&y_val.data)
            .map(|(a, b)| a - b)
            .collect(),
    });
    let y_tilde = g.add(y, u_y);
    let z_val = g.value(z).clone();
    let z_noisy = relax_quantize(&z_val, QuantMode::Train, &mut rng);
    let u_z = g.input(Tensor {
        shape: z_val.shape.clone(),
        data: z_noisy
            .data
            .iter()
            .zip(&z_val.data)
            .map(|(a, b)| a - b)
            .collect(),
    });
    let z_tilde = g.add(z, u_z);

    let (mean, scale) = model.hyper_synthesis_graph(&mut g, z_tilde);
    let x_tilde = model.decoder_graph(&mut g, y_tilde);

    let bits_y = g.custom(GaussianBits, &[y_tilde, mean, scale]);
    let mut dens = vec![z_tilde];
    dens.extend(PARAM_NAMES.iter().map(|n| g.param_named(n)));
    let bits_z = g.custom(FactorizedBits, &dens);
    let weights = block_weights(block, importance, spec, cfg.a);
    let dist = g.custom(
        WeightedSse {
            target: to_f32(&block.values),
            weights: to_f32(&weights),
        },
        &[x_tilde],
    );
    let rate = g.add(bits_y, bits_z);
    let scaled = g.scale(dist, cfg.lambda as f32);
    let mut loss = g.add(rate, scaled);
    if cfg.balance_blocks {
        let inside: Vec<f64> = weights.iter().copied().filter(|&w| w > 0.0).collect();
        if !inside.is_empty() {
            let mean = inside.iter().sum::<f64>() / inside.len() as f64;
            loss = g.scale(loss, (1.0 / mean) as f32);
        }
    }
    let parts = LossParts::combine(
        g.value(rate).data[0] as f64,
        g.value(dist).data[0] as f64,
        cfg.lambda,
    )?;
    let grads = g.backward(loss);
    if grads.iter().any(|t| !t.is_finite()) {
        return Err(Error::Diverged {
            epoch: 0,
            reason: "non-finite gradient".into(),
        });
    }
    Ok((parts, grads))
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn save_atomic(model: &Model, dir: &Path, name: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(".{name}.tmp"));
    model.save(&tmp)?;
    fs::rename(&tmp, dir.join(name))?;
    Ok(())
}

/// Trains `model` in place on `blocks`.
///
/// Each epoch shuffles the blocks, draws a fresh synthetic importance map per
/// block (unless `fixed_importance`), and takes one Adam step per batch with
/// gradients averaged over the batch. Results depend only on `cfg.seed`, not
/// on the thread count. With a checkpoint directory, `latest.idlc` is
/// rewritten after every epoch; on divergence the parameters are rolled back
/// to the start of the failing epoch and saved as `last_good.idlc`.
pub fn train(blocks: &[DataBlock], cfg: &TrainConfig, model: &mut Model) -> Result<TrainReport> {
    cfg.validate()?;
    if blocks.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let n = model.block_spec.padded_len();
    if let Some(b) = blocks.iter().find(|b| b.values.len() != n) {
        return Err(Error::shape(&[n], &[b.values.len()]));
    }
    if let Some(path) = &cfg.log_path {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, "epoch,L,L_R,L_D,wall_time\n")?;
    }
    let mut opt = Adam::new(&model.params, cfg.lr_main, cfg.lr_entropy);
    let mut report = TrainReport::default();
    let started = Instant::now();
    for epoch in 0..cfg.epochs {
        let snapshot = model.params.clone();
        let mut order: Vec<usize> = (0..blocks.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(
            cfg.seed,
            epoch as u64,
            u64::MAX,
        )));
        let mut losses = Vec::with_capacity(blocks.len());
        let (mut sum_rate, mut sum_dist) = (0.0, 0.0);
        let outcome: Result<()> = (|| {
            for batch in order.chunks(cfg.batch_size) {
                let results: Vec<Result<(LossParts, Vec<Tensor>)>> = batch
                    .par_iter()
                    .map(|&bi| {
                        let block = &blocks[bi];
                        let imp_seed = mix(cfg.seed, epoch as u64, bi as u64);
                        let importance = if cfg.fixed_importance {
                            block.importance.clone()
                        } else {
                            training_importance(block, &model.block_spec, imp_seed)?
                        };
                        sample_step(model, block, &importance, cfg, imp_seed.rotate_left(17))
                    })
                    .collect();
                let mut total = model.params.zeros_like();
                for r in results {
                    let (parts, grads) = r?;
                    losses.push(parts.total);
                    sum_rate += parts.rate;
                    sum_dist += parts.distortion;
                    for (t, g) in total.iter_mut().zip(&grads) {
                        t.add_assign(g);
                    }
                }
                let inv = 1.0 / batch.len() as f32;
                for t in total.iter_mut() {
                    t.data.iter_mut().for_each(|v| *v *= inv);
                }
                opt.step(&mut model.params, &total);
            }
            Ok(())
        })();
        let diverged = match outcome {
            Err(Error::Diverged { reason, .. }) => Some(reason),
            Err(e) => return Err(e),
            Ok(()) if model.params.tensors.iter().any(|t| !t.is_finite()) => {
                Some("non-finite parameters".to_string())
            }
            Ok(()) => None,
        };
        if let Some(reason) = diverged {
            model.params = snapshot;
            if let Some(dir) = &cfg.checkpoint_dir {
                save_atomic(model, dir, "last_good.idlc")?;
            }
            log::error!("epoch {epoch}: {reason}; parameters rolled back");
            return Err(Error::Diverged { epoch, reason });
        }
        let count = losses.len() as f64;
        let stats = EpochStats {
            epoch,
            loss: losses.iter().sum::<f64>() / count,
            rate: sum_rate / count,
            distortion: sum_dist / count,
            median_loss: median(&mut losses),
            wall_time: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: L {:.4} L_R {:.4} L_D {:.6}",
            stats.loss,
            stats.rate,
            stats.distortion
        );
        if let Some(path) = &cfg.log_path {
            let mut f = OpenOptions::new().append(true).open(path)?;
            writeln!(
                f,
                "{},{},{},{},{:.3}",
                stats.epoch, stats.loss, stats.rate, stats.distortion, stats.wall_time
            )?;
        }
        if let Some(dir) = &cfg.checkpoint_dir {
            save_atomic(model, dir, "latest.idlc")?;
        }
        report.epochs.push(stats);
    }
    Ok(report)
}

/// Mean rate (bits) and distortion per block under actual rounding, using
/// each block's own importance map. Rates are ideal code lengths under the
/// model's discrete probabilities.
pub fn evaluate(blocks: &[DataBlock], model: &Model, lambda: f64, a: f64) -> Result<LossParts> {
    if blocks.is_empty() {
        return Err(Error::InvalidArgument("evaluation set is empty".into()));
    }
    let parts: Vec<Result<(f64, f64)>> = blocks
        .par_iter()
        .map(|b| {
            let y = model.encode(&b.values, &b.importance)?;
            let y_hat = quantize(&y);
            let z = model.hyper_encode(&y)?;
            let z_hat = quantize(&z);
            let (mean, scale) = model.entropy_params(&z_hat)?;
            let density = Density::from_store(&model.params);
            let c = density.channels();
            let mut bits = 0.0;
            for (i, &v) in z_hat.data.iter().enumerate() {
                bits -= density
                    .likelihood(i % c, v as f64)
                    .max(LIKELIHOOD_BOUND)
                    .log2();
            }
            for i in 0..y_hat.len() {
                let p = gaussian::likelihood(
                    y_hat.data[i] as f64,
                    mean.data[i] as f64,
                    scale.data[i] as f64,
                );
                bits -= p.max(LIKELIHOOD_BOUND).log2();
            }
            let x_tilde = model.decode(&y_hat)?.to_f64();
            let w = block_weights(b, &b.importance, &model.block_spec, a);
            let d = b
                .values
                .iter()
                .zip(&x_tilde)
                .zip(&w)
                .map(|((p, q), w)| w * (p - q) * (p - q))
                .sum();
            Ok((bits, d))
        })
        .collect();
    let (mut r, mut d) = (0.0, 0.0);
    for p in parts {
        let (pr, pd) = p?;
        r += pr;
        d += pd;
    }
    let n = blocks.len() as f64;
    LossParts::combine(r / n, d / n, lambda)
}
