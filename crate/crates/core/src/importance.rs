//! Spatial importance maps.
//!
//! An importance map assigns every voxel a value in `[0, 1]` that tells the
//! encoder how much of the local information must survive in the latent.
//! Maps come either from a domain definition (distance to an isosurface,
//! value threshold, region of interest) or from randomized generators used
//! to diversify training.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Dims, Volume};

pub const DEFAULT_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceMap {
    pub dims: Dims,
    pub values: Vec<f64>,
}

impl ImportanceMap {
    pub fn new(dims: Dims, values: Vec<f64>) -> Result<Self> {
        if values.len() != dims.len() {
            return Err(Error::shape(&[dims.len()], &[values.len()]));
        }
        if let Some(bad) = values.iter().find(|x| !(0.0..=1.0).contains(*x)) {
            return Err(Error::Input(format!(
                "importance value {bad} outside [0, 1]"
            )));
        }
        Ok(ImportanceMap { dims, values })
    }

    pub fn constant(dims: Dims, level: f64) -> Self {
        ImportanceMap {
            dims,
            values: vec![level.clamp(0.0, 1.0); dims.len()],
        }
    }

    pub fn from_volume(v: &Volume) -> Result<Self> {
        Self::new(v.dims, v.values.clone())
    }

    pub fn to_volume(&self) -> Volume {
        Volume::new(self.dims, self.values.clone()).expect("same dims")
    }

    /// Zeroes importance on voxels the volume marks invalid.
    pub fn masked_by(mut self, v: &Volume) -> Self {
        if let Some(mask) = &v.mask {
            for (x, &ok) in self.values.iter_mut().zip(mask) {
                if !ok {
                    *x = 0.0;
                }
            }
        }
        self
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// `exp(-slope * d)` where `d` is the Euclidean voxel distance to the nearest
/// voxel on the `isovalue` level set.
pub fn importance_from_isosurface(v: &Volume, isovalue: f64, slope: f64) -> Result<ImportanceMap> {
    if !(slope > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "slope must be positive, got {slope}"
        )));
    }
    let (lo, hi) = v.value_range;
    if !(lo..=hi).contains(&isovalue) {
        return Err(Error::EmptySurface(isovalue));
    }
    let surface = surface_voxels(v, isovalue);
    if !surface.iter().any(|&s| s) {
        return Err(Error::EmptySurface(isovalue));
    }
    let dist2 = squared_distance_transform(v.dims, &surface);
    let values = dist2.iter().map(|&d2| (-slope * d2.sqrt()).exp()).collect();
    Ok(ImportanceMap {
        dims: v.dims,
        values,
    }
    .masked_by(v))
}

/// Valid voxels whose side of the level set differs from a valid 6-neighbour,
/// plus voxels lying exactly on it.
pub fn surface_voxels(v: &Volume, isovalue: f64) -> Vec<bool> {
    let d = v.dims;
    let above = |idx: usize| v.values[idx] >= isovalue;
    let mut out = vec![false; d.len()];
    for k in 0..d.nz() {
        for j in 0..d.ny() {
            for i in 0..d.nx() {
                let idx = d.index(i, j, k);
                if !v.is_valid(idx) {
                    continue;
                }
                if v.values[idx] == isovalue {
                    out[idx] = true;
                    continue;
                }
                let here = above(idx);
                let mut neighbours = [None; 6];
                if i > 0 {
                    neighbours[0] = Some(d.index(i - 1, j, k));
                }
                if i + 1 < d.nx() {
                    neighbours[1] = Some(d.index(i + 1, j, k));
                }
                if j > 0 {
                    neighbours[2] = Some(d.index(i, j - 1, k));
                }
                if j + 1 < d.ny() {
                    neighbours[3] = Some(d.index(i, j + 1, k));
                }
                if k > 0 {
                    neighbours[4] = Some(d.index(i, j, k - 1));
                }
                if k + 1 < d.nz() {
                    neighbours[5] = Some(d.index(i, j, k + 1));
                }
                out[idx] = neighbours
                    .iter()
                    .flatten()
                    .any(|&n| v.is_valid(n) && above(n) != here);
            }
        }
    }
    out
}

/// Exact squared Euclidean distance transform to the `true` voxels, computed
/// with separable lower envelopes of parabolas along each axis.
pub fn squared_distance_transform(dims: Dims, seeds: &[bool]) -> Vec<f64> {
    const FAR: f64 = 1e20;
    let mut grid: Vec<f64> = seeds.iter().map(|&s| if s { 0.0 } else { FAR }).collect();
    let n = dims.0;
    let strides = [1, n[0], n[0] * n[1]];
    let longest = *n.iter().max().unwrap();
    let mut line = vec![0.0; longest];
    let mut out = vec![0.0; longest];
    let mut env = Envelope::new(longest);
    for axis in 0..3 {
        let (a, b) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        for u in 0..n[a] {
            for w in 0..n[b] {
                let base = u * strides[a] + w * strides[b];
                let len = n[axis];
                for t in 0..len {
                    line[t] = grid[base + t * strides[axis]];
                }
                env.transform(&line[..len], &mut out[..len]);
                for t in 0..len {
                    grid[base + t * strides[axis]] = out[t];
                }
            }
        }
    }
    grid
}

struct Envelope {
    v: Vec<usize>,
    z: Vec<f64>,
}

impl Envelope {
    fn new(n: usize) -> Self {
        Envelope {
            v: vec![0; n],
            z: vec![0.0; n + 1],
        }
    }

    fn transform(&mut self, f: &[f64], d: &mut [f64]) {
        let n = f.len();
        let mut k = 0usize;
        self.v[0] = 0;
        self.z[0] = f64::NEG_INFINITY;
        self.z[1] = f64::INFINITY;
        for q in 1..n {
            let mut s;
            loop {
                let p = self.v[k];
                s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64))
                    / (2.0 * (q as f64 - p as f64));
                if s > self.z[k] {
                    break;
                }
                k -= 1;
            }
            k += 1;
            self.v[k] = q;
            self.z[k] = s;
            self.z[k + 1] = f64::INFINITY;
        }
        k = 0;
        for (q, dq) in d.iter_mut().enumerate() {
            while self.z[k + 1] < q as f64 {
                k += 1;
            }
            let p = self.v[k];
            let diff = q as f64 - p as f64;
            *dq = diff * diff + f[p];
        }
    }
}

/// 1 where the value strictly exceeds `reference`, else 0.
pub fn importance_from_threshold(v: &Volume, reference: f64) -> ImportanceMap {
    let values = v
        .values
        .iter()
        .map(|&x| if x > reference { 1.0 } else { 0.0 })
        .collect();
    ImportanceMap {
        dims: v.dims,
        values,
    }
    .masked_by(v)
}

/// Half-open axis-aligned voxel box `[lo, hi)`; coordinates may lie outside the
/// domain and are clipped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoxelBox {
    pub lo: [i64; 3],
    pub hi: [i64; 3],
}

impl VoxelBox {
    pub fn new(lo: [i64; 3], hi: [i64; 3]) -> Self {
        VoxelBox { lo, hi }
    }

    pub fn voxel(i: usize, j: usize, k: usize) -> Self {
        let (i, j, k) = (i as i64, j as i64, k as i64);
        VoxelBox {
            lo: [i, j, k],
            hi: [i + 1, j + 1, k + 1],
        }
    }

    /// Parses `"x0,y0,z0,x1,y1,z1"` (half-open).
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<i64> = s
            .split(',')
            .map(|p| p.trim().parse::<i64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::InvalidArgument(format!("bad box {s:?}: {e}")))?;
        if parts.len() != 6 {
            return Err(Error::InvalidArgument(format!(
                "box needs 6 integers, got {s:?}"
            )));
        }
        Ok(VoxelBox {
            lo: [parts[0], parts[1], parts[2]],
            hi: [parts[3], parts[4], parts[5]],
        })
    }

    fn clipped(&self, dims: Dims) -> Option<([usize; 3], [usize; 3])> {
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        for a in 0..3 {
            let l = self.lo[a].max(0);
            let h = self.hi[a].min(dims.0[a] as i64);
            if l >= h {
                return None;
            }
            lo[a] = l as usize;
            hi[a] = h as usize;
        }
        Some((lo, hi))
    }
}

/// 1 inside the box, 0 outside.
pub fn importance_from_region(v: &Volume, region: &VoxelBox) -> Result<ImportanceMap> {
    let (lo, hi) = region.clipped(v.dims).ok_or(Error::EmptyRegion)?;
    let d = v.dims;
    let mut values = vec![0.0; d.len()];
    for k in lo[2]..hi[2] {
        for j in lo[1]..hi[1] {
            for i in lo[0]..hi[0] {
                values[d.index(i, j, k)] = 1.0;
            }
        }
    }
    Ok(ImportanceMap { dims: d, values }.masked_by(v))
}

/// Binary map of the voxels within one gradient step of the level set:
/// `|F - isovalue| <= |grad F|`, evaluated with central differences.
pub fn importance_from_surface_band(v: &Volume, isovalue: f64) -> Result<ImportanceMap> {
    let (lo, hi) = v.value_range;
    if !(lo..=hi).contains(&isovalue) {
        return Err(Error::EmptySurface(isovalue));
    }
    let grad = gradient_magnitude(v);
    let values = v
        .values
        .iter()
        .zip(&grad)
        .map(|(&x, &g)| if (x - isovalue).abs() <= g { 1.0 } else { 0.0 })
        .collect();
    Ok(ImportanceMap {
        dims: v.dims,
        values,
    }
    .masked_by(v))
}

/// Central-difference gradient magnitude (one-sided at the boundary).
pub fn gradient_magnitude(v: &Volume) -> Vec<f64> {
    let d = v.dims;
    let mut out = vec![0.0; d.len()];
    let diff = |lo: usize, hi: usize, a: f64, b: f64| -> f64 {
        if hi > lo {
            (b - a) / (hi - lo) as f64
        } else {
            0.0
        }
    };
    for k in 0..d.nz() {
        for j in 0..d.ny() {
            for i in 0..d.nx() {
                let (i0, i1) = (i.saturating_sub(1), (i + 1).min(d.nx() - 1));
                let (j0, j1) = (j.saturating_sub(1), (j + 1).min(d.ny() - 1));
                let (k0, k1) = (k.saturating_sub(1), (k + 1).min(d.nz() - 1));
                let gx = diff(i0, i1, v.get(i0, j, k), v.get(i1, j, k));
                let gy = diff(j0, j1, v.get(i, j0, k), v.get(i, j1, k));
                let gz = diff(k0, k1, v.get(i, j, k0), v.get(i, j, k1));
                out[d.index(i, j, k)] = (gx * gx + gy * gy + gz * gz).sqrt();
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingMapKind {
    Ramp,
    Gaussian,
    Gradient,
    UniformRandom,
    Constant,
}

impl TrainingMapKind {
    pub const ALL: [TrainingMapKind; 5] = [
        TrainingMapKind::Ramp,
        TrainingMapKind::Gaussian,
        TrainingMapKind::Gradient,
        TrainingMapKind::UniformRandom,
        TrainingMapKind::Constant,
    ];
}

/// Gaussian bump `exp(-0.5 (d / sigma)^2)` around `center` (voxel coordinates).
pub fn gaussian_map(dims: Dims, center: [f64; 3], sigma: f64) -> ImportanceMap {
    map_from_fn(dims, |p| {
        let d2: f64 = (0..3).map(|a| (p[a] - center[a]).powi(2)).sum();
        (-0.5 * d2 / (sigma * sigma)).exp()
    })
}

/// Linear ramp `1 - d / radius` around `center`, clamped to `[0, 1]`.
pub fn ramp_map(dims: Dims, center: [f64; 3], radius: f64) -> ImportanceMap {
    map_from_fn(dims, |p| {
        let d: f64 = (0..3)
            .map(|a| (p[a] - center[a]).powi(2))
            .sum::<f64>()
            .sqrt();
        1.0 - d / radius
    })
}

/// Gradient magnitude scaled by its maximum.
pub fn gradient_map(v: &Volume) -> ImportanceMap {
    let g = gradient_magnitude(v);
    let max = g.iter().cloned().fold(0.0, f64::max);
    let values = if max > 0.0 {
        g.iter().map(|x| x / max).collect()
    } else {
        vec![0.0; g.len()]
    };
    ImportanceMap {
        dims: v.dims,
        values,
    }
    .masked_by(v)
}

fn map_from_fn(dims: Dims, f: impl Fn([f64; 3]) -> f64) -> ImportanceMap {
    let mut values = Vec::with_capacity(dims.len());
    for k in 0..dims.nz() {
        for j in 0..dims.ny() {
            for i in 0..dims.nx() {
                values.push(f([i as f64, j as f64, k as f64]).clamp(0.0, 1.0));
            }
        }
    }
    ImportanceMap { dims, values }
}

/// Randomized importance map for training. All random parameters are drawn
/// from `seed`; the same arguments always give the same map.
pub fn synth_training_map(
    dims: Dims,
    kind: TrainingMapKind,
    seed: u64,
    volume: Option<&Volume>,
) -> Result<ImportanceMap> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let extent = dims.0.map(|n| n as f64);
    let diag = extent.iter().map(|e| e * e).sum::<f64>().sqrt();
    let mut center = || [0, 1, 2].map(|a| rng.gen_range(0.0..extent[a]));
    let map = match kind {
        TrainingMapKind::Ramp => {
            let c = center();
            let radius = rng.gen_range(0.25..1.0) * diag;
            ramp_map(dims, c, radius)
        }
        TrainingMapKind::Gaussian => {
            let c = center();
            let sigma = rng.gen_range(0.1..0.5) * diag;
            gaussian_map(dims, c, sigma)
        }
        TrainingMapKind::Gradient => {
            let v = volume.ok_or_else(|| {
                Error::InvalidArgument("gradient importance needs a volume".into())
            })?;
            if v.dims != dims {
                return Err(Error::shape(&dims.0, &v.dims.0));
            }
            gradient_map(v)
        }
        TrainingMapKind::UniformRandom => ImportanceMap {
            dims,
            values: (0..dims.len()).map(|_| rng.gen::<f64>()).collect(),
        },
        TrainingMapKind::Constant => ImportanceMap::constant(dims, rng.gen::<f64>()),
    };
    Ok(match volume {
        Some(v) if v.dims == dims => map.masked_by(v),
        _ => map,
    })
}

/// Picks one of the five kinds uniformly, then synthesizes it.
pub fn synth_random_map(dims: Dims, seed: u64, volume: Option<&Volume>) -> Result<ImportanceMap> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let kinds: Vec<TrainingMapKind> = TrainingMapKind::ALL
        .into_iter()
        .filter(|k| volume.is_some() || *k != TrainingMapKind::Gradient)
        .collect();
    let kind = kinds[rng.gen_range(0..kinds.len())];
    synth_training_map(dims, kind, rng.gen(), volume)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sphere(n: usize, r: f64) -> Volume {
        let c = (n as f64 - 1.0) / 2.0;
        Volume::from_fn(Dims::cube(n), |i, j, k| {
            ((i as f64 - c).powi(2) + (j as f64 - c).powi(2) + (k as f64 - c).powi(2)).sqrt() - r
        })
    }

    #[test]
    fn on_surface_is_one() {
        let v = sphere(8, 2.5);
        let m = importance_from_isosurface(&v, 0.0, 0.2).unwrap();
        let surf = surface_voxels(&v, 0.0);
        for (x, s) in m.values.iter().zip(surf) {
            if s {
                assert_eq!(*x, 1.0);
            } else {
                assert!(*x < 1.0 && *x > 0.0);
            }
        }
    }

    #[test]
    fn distance_five_with_default_slope() {
        // a single surface voxel in a line of length 11
        let mut vals = vec![1.0; 11];
        vals[0] = -1.0;
        let v = Volume::new(Dims::new(11, 1, 1), vals).unwrap();
        let m = importance_from_isosurface(&v, 0.0, DEFAULT_SLOPE).unwrap();
        // voxels 0 and 1 straddle the level set
        assert!((m.values[6] - (-1.0f64).exp()).abs() < 1e-12);
        assert!((m.values[6] - 0.3679).abs() < 1e-4);
    }

    #[test]
    fn isovalue_outside_range() {
        let v = sphere(8, 2.5);
        assert!(matches!(
            importance_from_isosurface(&v, 100.0, 0.2),
            Err(Error::EmptySurface(_))
        ));
    }

    #[test]
    fn threshold_is_strict() {
        let v = Volume::new(Dims::new(3, 1, 1), vec![10.0, 9.9, 9.0]).unwrap();
        let m = importance_from_threshold(&v, 9.9);
        assert_eq!(m.values, vec![1.0, 0.0, 0.0]);
        let all = importance_from_threshold(&v, -1.0);
        assert_eq!(all.values, vec![1.0; 3]);
    }

    #[test]
    fn threshold_rethreshold_idempotent() {
        let v = sphere(6, 1.5);
        let m = importance_from_threshold(&v, 0.3);
        let again = importance_from_threshold(&m.to_volume(), 0.5);
        assert_eq!(m.values, again.values);
    }

    #[test]
    fn region_cases() {
        let v = sphere(8, 2.0);
        let all = importance_from_region(&v, &VoxelBox::new([-5, -5, -5], [50, 50, 50])).unwrap();
        assert!(all.values.iter().all(|&x| x == 1.0));
        let one = importance_from_region(&v, &VoxelBox::voxel(3, 4, 5)).unwrap();
        assert_eq!(one.sum(), 1.0);
        assert_eq!(one.values[v.dims.index(3, 4, 5)], 1.0);
        assert!(matches!(
            importance_from_region(&v, &VoxelBox::new([8, 0, 0], [10, 2, 2])),
            Err(Error::EmptyRegion)
        ));
    }

    #[test]
    fn region_fraction_on_32_cube() {
        let v = Volume::from_fn(Dims::cube(32), |i, _, _| i as f64);
        let b = VoxelBox::new([10, 12, 4], [20, 22, 28]);
        let m = importance_from_region(&v, &b).unwrap();
        let mut count = 0usize;
        for k in 0..32i64 {
            for j in 0..32i64 {
                for i in 0..32i64 {
                    if (10..20).contains(&i) && (12..22).contains(&j) && (4..28).contains(&k) {
                        count += 1;
                    }
                }
            }
        }
        assert_eq!(m.sum(), count as f64);
        assert_eq!(m.sum() / 32768.0, 2400.0 / 32768.0);
    }

    #[test]
    fn masked_voxels_get_zero() {
        let v = Volume::with_mask(
            Dims::new(3, 1, 1),
            vec![1.0, 2.0, 3.0],
            Some(vec![true, false, true]),
        )
        .unwrap();
        assert_eq!(
            importance_from_threshold(&v, 0.0).values,
            vec![1.0, 0.0, 1.0]
        );
        let r = importance_from_region(&v, &VoxelBox::new([0, 0, 0], [3, 1, 1])).unwrap();
        assert_eq!(r.values[1], 0.0);
    }

    #[test]
    fn constant_and_gaussian() {
        let c = synth_training_map(Dims::cube(4), TrainingMapKind::Constant, 0, None).unwrap();
        assert!(c.values.windows(2).all(|w| w[0] == w[1]));
        assert_eq!(
            ImportanceMap::constant(Dims::cube(4), 1.0).values,
            vec![1.0; 64]
        );

        let n = 9;
        let c = (n as f64 - 1.0) / 2.0;
        let sigma = n as f64 / 4.0;
        let g = gaussian_map(Dims::cube(n), [c, c, c], sigma);
        assert_eq!(g.values[Dims::cube(n).index(4, 4, 4)], 1.0);
        let d: f64 = (1.0f64 + 4.0 + 9.0).sqrt();
        let expect = (-0.5 * (d / sigma).powi(2)).exp();
        assert!((g.values[Dims::cube(n).index(5, 6, 7)] - expect).abs() < 1e-15);
    }

    #[test]
    fn synth_is_deterministic() {
        let d = Dims::cube(6);
        let a = synth_training_map(d, TrainingMapKind::UniformRandom, 42, None).unwrap();
        let b = synth_training_map(d, TrainingMapKind::UniformRandom, 42, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gradient_needs_volume() {
        assert!(synth_training_map(Dims::cube(4), TrainingMapKind::Gradient, 1, None).is_err());
        let v = sphere(6, 1.5);
        let g = synth_training_map(v.dims, TrainingMapKind::Gradient, 1, Some(&v)).unwrap();
        assert!(g.values.iter().all(|x| (0.0..=1.0).contains(x)));
        assert!(g.values.contains(&1.0));
    }
}
