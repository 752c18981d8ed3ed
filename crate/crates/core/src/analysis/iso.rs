use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blocking::{partition, BlockSpec};
use crate::codec::file_normalization;
use crate::error::{Error, Result};
use crate::importance::importance_from_surface_band;
use crate::network::{quantize, Model};
use crate::volume::{normalize_with, Volume};

/// Cosine of the angle between `u` and `v`; `None` when either is zero.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Option<f64> {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    (nu > 0.0 && nv > 0.0).then(|| (dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Latent description of one isosurface: every block is encoded under a
/// binary importance map marking the voxels within one gradient step of the
/// level set, and the quantized latents are concatenated in grid order.
pub fn isosurface_repr(v: &Volume, isovalue: f64, model: &Model) -> Result<Vec<f64>> {
    let importance = importance_from_surface_band(v, isovalue)?;
    let norm = file_normalization(v, model)?;
    let blocks = partition(&normalize_with(v, &norm), &importance, &model.block_spec)?;
    let latents = blocks
        .par_iter()
        .map(|b| {
            model
                .encode(&b.values, &b.importance)
                .map(|y| quantize(&y).to_f64())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(latents.concat())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMap {
    /// Strictly ascending.
    pub isovalues: Vec<f64>,
    /// Row-major `V x V`.
    pub matrix: Vec<Vec<f64>>,
}

impl SimilarityMap {
    /// Sorts the isovalues ascending and permutes the matrix to match.
    pub fn new(isovalues: Vec<f64>, matrix: Vec<Vec<f64>>) -> Result<Self> {
        let n = isovalues.len();
        if matrix.len() != n || matrix.iter().any(|r| r.len() != n) {
            return Err(Error::shape(
                &[n, n],
                &[matrix.len(), matrix.first().map_or(0, Vec::len)],
            ));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| isovalues[a].total_cmp(&isovalues[b]));
        let iso: Vec<f64> = order.iter().map(|&i| isovalues[i]).collect();
        if iso.windows(2).any(|w| w[0] >= w[1]) || iso.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument(
                "isovalues must be finite and distinct".into(),
            ));
        }
        let m = order
            .iter()
            .map(|&i| order.iter().map(|&j| matrix[i][j]).collect())
            .collect();
        Ok(SimilarityMap {
            isovalues: iso,
            matrix: m,
        })
    }

    pub fn len(&self) -> usize {
        self.isovalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.isovalues.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("isovalue");
        for v in &self.isovalues {
            s.push_str(&format!(",{v}"));
        }
        s.push('\n');
        for (v, row) in self.isovalues.iter().zip(&self.matrix) {
            s.push_str(&v.to_string());
            for x in row {
                s.push_str(&format!(",{x}"));
            }
            s.push('\n');
        }
        s
    }
}

/// Pairwise cosine similarities of precomputed representations.
pub fn similarity_from_reprs(isovalues: &[f64], reprs: &[Vec<f64>]) -> Result<SimilarityMap> {
    let n = isovalues.len();
    if n < 2 {
        return Err(Error::InvalidArgument("need at least two isovalues".into()));
    }
    if reprs.len() != n {
        return Err(Error::shape(&[n], &[reprs.len()]));
    }
    for (iso, r) in isovalues.iter().zip(reprs) {
        if r.iter().all(|&x| x == 0.0) {
            return Err(Error::Analysis(format!(
                "isovalue {iso} has an all-zero latent representation"
            )));
        }
    }
    let upper: Vec<((usize, usize), f64)> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|(i, j)| {
            (
                (i, j),
                cosine_similarity(&reprs[i], &reprs[j]).expect("nonzero rows"),
            )
        })
        .collect();
    let mut m = vec![vec![0.0; n]; n];
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for ((i, j), s) in upper {
        m[i][j] = s;
        m[j][i] = s;
    }
    SimilarityMap::new(isovalues.to_vec(), m)
}

pub fn similarity_map(v: &Volume, isovalues: &[f64], model: &Model) -> Result<SimilarityMap> {
    let reprs = isovalues
        .iter()
        .map(|&iso| isosurface_repr(v, iso, model))
        .collect::<Result<Vec<_>>>()?;
    similarity_from_reprs(isovalues, &reprs)
}

/// Greedy representative selection. The first pick has the largest total
/// similarity to all isovalues; each further pick maximizes its smallest
/// dissimilarity to those already chosen. Ties go to the smaller isovalue.
/// Returned ascending.
pub fn select_representatives(map: &SimilarityMap, n: usize) -> Result<Vec<f64>> {
    let v = map.len();
    if n == 0 {
        return Err(Error::InvalidArgument(
            "must select at least one isovalue".into(),
        ));
    }
    if n > v {
        return Err(Error::InvalidArgument(format!(
            "cannot select {n} of {v} isovalues"
        )));
    }
    let argmax = |score: &dyn Fn(usize) -> f64, skip: &[usize]| -> usize {
        let mut best = None;
        for i in (0..v).filter(|i| !skip.contains(i)) {
            let s = score(i);
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((i, s));
            }
        }
        best.expect("candidates remain").0
    };
    let mut chosen = vec![argmax(&|i| map.matrix[i].iter().sum(), &[])];
    while chosen.len() < n {
        let picked = chosen.clone();
        let next = argmax(
            &|i| {
                picked
                    .iter()
                    .map(|&c| 1.0 - map.matrix[i][c])
                    .fold(f64::INFINITY, f64::min)
            },
            &chosen,
        );
        chosen.push(next);
    }
    chosen.sort_unstable();
    Ok(chosen.into_iter().map(|i| map.isovalues[i]).collect())
}

/// Parses `start:stop:step` (stop inclusive) or a comma-separated list.
pub fn parse_isovalues(s: &str) -> Result<Vec<f64>> {
    let num = |t: &str| {
        t.trim()
            .parse::<f64>()
            .map_err(|_| Error::InvalidArgument(format!("bad isovalue '{t}'")))
    };
    let parts: Vec<&str> = s.split(':').collect();
    match parts.as_slice() {
        [a, b, c] => {
            let (start, stop, step) = (num(a)?, num(b)?, num(c)?);
            if !(step > 0.0) || stop < start {
                return Err(Error::InvalidArgument(format!("bad isovalue range '{s}'")));
            }
            let count = ((stop - start) / step + 1e-9).floor() as usize + 1;
            Ok((0..count).map(|i| start + i as f64 * step).collect())
        }
        [_] => s.split(',').map(num).collect(),
        _ => Err(Error::InvalidArgument(format!("bad isovalue range '{s}'"))),
    }
}

/// Distribution of per-block mean x-gradients, smoothed with a Gaussian
/// kernel density estimate (Silverman bandwidth).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientKde {
    pub block_gradients: Vec<f64>,
    pub bandwidth: f64,
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
}

pub fn gradient_kde(v: &Volume, spec: &BlockSpec, samples: usize) -> Result<GradientKde> {
    spec.validate()?;
    if samples < 2 {
        return Err(Error::InvalidArgument(
            "need at least two KDE samples".into(),
        ));
    }
    let d = v.dims;
    let gx = |i: usize, j: usize, k: usize| -> f64 {
        let lo = i.saturating_sub(1);
        let hi = (i + 1).min(d.nx() - 1);
        if hi == lo {
            0.0
        } else {
            (v.get(hi, j, k) - v.get(lo, j, k)) / (hi - lo) as f64
        }
    };
    let grads: Vec<f64> = spec
        .indices(d)
        .iter()
        .map(|&b| {
            let (lo, hi) = spec.content_box(d, b);
            let mut sum = 0.0;
            let mut n = 0usize;
            for k in lo[2]..hi[2] {
                for j in lo[1]..hi[1] {
                    for i in lo[0]..hi[0] {
                        sum += gx(i, j, k);
                        n += 1;
                    }
                }
            }
            sum / n.max(1) as f64
        })
        .collect();
    let n = grads.len() as f64;
    let mean = grads.iter().sum::<f64>() / n;
    let sd = (grads.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
    let bandwidth = if sd > 0.0 {
        1.06 * sd * n.powf(-0.2)
    } else {
        1e-3
    };
    let lo = grads.iter().copied().fold(f64::INFINITY, f64::min) - 3.0 * bandwidth;
    let hi = grads.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 3.0 * bandwidth;
    let grid: Vec<f64> = (0..samples)
        .map(|i| lo + (hi - lo) * i as f64 / (samples - 1) as f64)
        .collect();
    let norm = 1.0 / (n * bandwidth * (2.0 * std::f64::consts::PI).sqrt());
    let density = grid
        .iter()
        .map(|&x| {
            norm * grads
                .iter()
                .map(|g| (-0.5 * ((x - g) / bandwidth).powi(2)).exp())
                .sum::<f64>()
        })
        .collect();
    Ok(GradientKde {
        block_gradients: grads,
        bandwidth,
        grid,
        density,
    })
}
