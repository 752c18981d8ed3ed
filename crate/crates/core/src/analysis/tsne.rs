//! Exact t-SNE.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::LatentTable;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub seed: u64,
    pub iterations: usize,
    /// `None` picks `max(n / early_exaggeration / 4, 50)`.
    pub learning_rate: Option<f64>,
    pub early_exaggeration: f64,
    pub exaggeration_iters: usize,
}

impl TsneConfig {
    pub fn new(perplexity: f64, seed: u64) -> Self {
        TsneConfig {
            perplexity,
            seed,
            iterations: 1000,
            learning_rate: None,
            early_exaggeration: 12.0,
            exaggeration_iters: 250,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding2D {
    /// One point per table row, in row order.
    pub points: Vec<[f64; 2]>,
    pub perplexity: f64,
    pub seed: u64,
}

/// Row-conditional probabilities whose entropy matches `log2(perplexity)`,
/// found by bisection on the precision.
fn conditional_p(d2: &[f64], n: usize, perplexity: f64) -> Vec<f64> {
    let target = perplexity.ln();
    let mut p = vec![0.0; n * n];
    p.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let d = &d2[i * n..(i + 1) * n];
        let (mut lo, mut hi, mut beta) = (0.0f64, f64::INFINITY, 1.0f64);
        let dmin = d
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, &x)| x)
            .fold(f64::INFINITY, f64::min);
        for _ in 0..200 {
            let mut sum = 0.0;
            let mut dot = 0.0;
            for j in 0..n {
                if j == i {
                    row[j] = 0.0;
                    continue;
                }
                // Shifting by the nearest distance keeps the largest term at 1.
                let e = (-(d[j] - dmin) * beta).exp();
                row[j] = e;
                sum += e;
                dot += (d[j] - dmin) * e;
            }
            let entropy = sum.ln() + beta * dot / sum;
            if (entropy - target).abs() < 1e-5 {
                break;
            }
            if entropy > target {
                lo = beta;
                beta = if hi.is_finite() {
                    0.5 * (beta + hi)
                } else {
                    beta * 2.0
                };
            } else {
                hi = beta;
                beta = 0.5 * (beta + lo);
            }
        }
        let sum: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= sum);
    });
    p
}

/// Embeds the rows of `table` in the plane.
pub fn project_2d(table: &LatentTable, cfg: &TsneConfig) -> Result<Embedding2D> {
    let n = table.len();
    if n < 3 {
        return Err(Error::Analysis(format!(
            "t-SNE needs at least 3 rows, got {n}"
        )));
    }
    if !(cfg.perplexity > 0.0 && cfg.perplexity < n as f64) {
        return Err(Error::InvalidArgument(format!(
            "perplexity {} must be positive and below the row count {n}",
            cfg.perplexity
        )));
    }
    // Identical rows share one embedded point.
    let mut unique: Vec<&Vec<f64>> = Vec::new();
    let mut slot = Vec::with_capacity(n);
    let mut seen: HashMap<Vec<u64>, usize> = HashMap::new();
    for r in &table.rows {
        let key: Vec<u64> = r.iter().map(|x| x.to_bits()).collect();
        let next = unique.len();
        let s = *seen.entry(key).or_insert(next);
        if s == next {
            unique.push(r);
        }
        slot.push(s);
    }
    let y = embed(&unique, cfg)?;
    Ok(Embedding2D {
        points: slot.iter().map(|&s| y[s]).collect(),
        perplexity: cfg.perplexity,
        seed: cfg.seed,
    })
}

fn embed(rows: &[&Vec<f64>], cfg: &TsneConfig) -> Result<Vec<[f64; 2]>> {
    let n = rows.len();
    match n {
        1 => return Ok(vec![[0.0, 0.0]]),
        2 => return Ok(vec![[-1.0, 0.0], [1.0, 0.0]]),
        _ => {}
    }
    let perplexity = cfg.perplexity.min(n as f64 - 1.0);
    let lr = cfg
        .learning_rate
        .unwrap_or_else(|| (n as f64 / cfg.early_exaggeration / 4.0).max(50.0));
    let d2: Vec<f64> = (0..n * n)
        .into_par_iter()
        .map(|ij| {
            let (i, j) = (ij / n, ij % n);
            rows[i]
                .iter()
                .zip(rows[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum()
        })
        .collect();
    let cond = conditional_p(&d2, n, perplexity);
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            p[i * n + j] = ((cond[i * n + j] + cond[j * n + i]) / (2.0 * n as f64)).max(1e-12);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = Normal::new(0.0, 1e-4).expect("valid normal");
    let mut y: Vec<[f64; 2]> = (0..n)
        .map(|_| [init.sample(&mut rng), init.sample(&mut rng)])
        .collect();
    let mut velocity = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0; 2]; n];

    for it in 0..cfg.iterations {
        let exag = if it < cfg.exaggeration_iters {
            cfg.early_exaggeration
        } else {
            1.0
        };
        let momentum = if it < cfg.exaggeration_iters {
            0.5
        } else {
            0.8
        };
        let num: Vec<f64> = (0..n * n)
            .into_par_iter()
            .map(|ij| {
                let (i, j) = (ij / n, ij % n);
                if i == j {
                    0.0
                } else {
                    let dx = y[i][0] - y[j][0];
                    let dy = y[i][1] - y[j][1];
                    1.0 / (1.0 + dx * dx + dy * dy)
                }
            })
            .collect();
        let z: f64 = num.iter().sum();
        let grad: Vec<[f64; 2]> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut g = [0.0; 2];
                for j in 0..n {
                    let w = num[i * n + j];
                    let m = (exag * p[i * n + j] - w / z) * w;
                    g[0] += 4.0 * m * (y[i][0] - y[j][0]);
                    g[1] += 4.0 * m * (y[i][1] - y[j][1]);
                }
                g
            })
            .collect();
        for i in 0..n {
            for a in 0..2 {
                let same_sign = (grad[i][a] > 0.0) == (velocity[i][a] > 0.0);
                gains[i][a] = if same_sign {
                    (gains[i][a] * 0.8f64).max(0.01)
                } else {
                    gains[i][a] + 0.2
                };
                velocity[i][a] = momentum * velocity[i][a] - lr * gains[i][a] * grad[i][a];
                y[i][a] += velocity[i][a];
            }
        }
        let mean = [
            y.iter().map(|p| p[0]).sum::<f64>() / n as f64,
            y.iter().map(|p| p[1]).sum::<f64>() / n as f64,
        ];
        for p in &mut y {
            p[0] -= mean[0];
            p[1] -= mean[1];
        }
    }
    if y.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
        return Err(Error::Analysis(
            "t-SNE produced non-finite coordinates".into(),
        ));
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(rows: Vec<Vec<f64>>) -> LatentTable {
        let idx = (0..rows.len()).map(|i| [i, 0, 0]).collect();
        LatentTable::new([0; 16], "", idx, rows).unwrap()
    }

    fn blob_rows(n: usize) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = Normal::new(0.0, 1.0).unwrap();
        (0..n)
            .map(|i| {
                (0..5)
                    .map(|_| (i % 2) as f64 * 10.0 + g.sample(&mut rng))
                    .collect()
            })
            .collect()
    }

    #[test]
    fn separates_blobs_and_is_deterministic() {
        let t = table(blob_rows(30));
        let cfg = TsneConfig::new(5.0, 3);
        let e = project_2d(&t, &cfg).unwrap();
        assert_eq!(e, project_2d(&t, &cfg).unwrap());
        assert_eq!(e.points.len(), 30);
        let centroid = |c: usize| {
            let pts: Vec<_> = e
                .points
                .iter()
                .enumerate()
                .filter(|(i, _)| i % 2 == c)
                .map(|(_, p)| *p)
                .collect();
            let m = [
                pts.iter().map(|p| p[0]).sum::<f64>() / pts.len() as f64,
                pts.iter().map(|p| p[1]).sum::<f64>() / pts.len() as f64,
            ];
            let spread = pts
                .iter()
                .map(|p| ((p[0] - m[0]).powi(2) + (p[1] - m[1]).powi(2)).sqrt())
                .sum::<f64>()
                / pts.len() as f64;
            (m, spread)
        };
        let (m0, s0) = centroid(0);
        let (m1, s1) = centroid(1);
        let between = ((m0[0] - m1[0]).powi(2) + (m0[1] - m1[1]).powi(2)).sqrt();
        assert!(between > s0.max(s1), "{between} vs {s0} {s1}");
    }

    #[test]
    fn duplicates_coincide() {
        let mut rows = blob_rows(20);
        rows.push(rows[3].clone());
        let e = project_2d(&table(rows), &TsneConfig::new(5.0, 1)).unwrap();
        assert_eq!(e.points[3], e.points[20]);
        assert_ne!(e.points[3], e.points[5]);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(project_2d(&table(vec![vec![0.0], vec![1.0]]), &TsneConfig::new(1.0, 0)).is_err());
        assert!(project_2d(&table(blob_rows(5)), &TsneConfig::new(5.0, 0)).is_err());
    }
}
