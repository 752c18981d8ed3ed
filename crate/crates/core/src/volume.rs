//! Raw volumetric scalar fields: loading, masking, normalization and saving.
//!
//! Files are headerless little-endian arrays stored x-fastest, i.e. the voxel
//! `(i, j, k)` lives at linear index `i + nx * (j + ny * k)`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Grid dimensions `(nx, ny, nz)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims(pub [usize; 3]);

impl Dims {
    pub fn new(nx: usize, ny: usize, nz: usize) -> Self {
        Dims([nx, ny, nz])
    }

    pub fn cube(n: usize) -> Self {
        Dims([n, n, n])
    }

    pub fn nx(&self) -> usize {
        self.0[0]
    }

    pub fn ny(&self) -> usize {
        self.0[1]
    }

    pub fn nz(&self) -> usize {
        self.0[2]
    }

    pub fn len(&self) -> usize {
        self.0.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.0[0] * (j + self.0[1] * k)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> (usize, usize, usize) {
        let i = idx % self.0[0];
        let j = (idx / self.0[0]) % self.0[1];
        let k = idx / (self.0[0] * self.0[1]);
        (i, j, k)
    }

    /// Parses `"nx,ny,nz"`.
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::InvalidArgument(format!("bad dims {s:?}: {e}")))?;
        match parts.as_slice() {
            [nx, ny, nz] if *nx > 0 && *ny > 0 && *nz > 0 => Ok(Dims([*nx, *ny, *nz])),
            _ => Err(Error::InvalidArgument(format!(
                "dims must be three positive integers, got {s:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    #[default]
    F32le,
    F64le,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32le => 4,
            Dtype::F64le => 8,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "f32le" | "f32" => Ok(Dtype::F32le),
            "f64le" | "f64" => Ok(Dtype::F64le),
            other => Err(Error::InvalidArgument(format!("unknown dtype {other:?}"))),
        }
    }
}

/// Description of a raw volume on disk, as found in config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeSource {
    pub path: PathBuf,
    pub dims: [usize; 3],
    #[serde(default)]
    pub dtype: Dtype,
    #[serde(default)]
    pub sentinel: Option<f64>,
}

impl VolumeSource {
    pub fn load(&self) -> Result<Volume> {
        let v = load_raw(&self.path, Dims(self.dims), self.dtype)?;
        Ok(match self.sentinel {
            Some(s) => apply_sentinel_mask(v, s),
            None => v,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: Dims,
    pub values: Vec<f64>,
    pub value_range: (f64, f64),
    /// `true` marks a valid voxel. `None` means every voxel is valid.
    pub mask: Option<Vec<bool>>,
    pub name: String,
}

impl Volume {
    /// Builds a volume and computes its value range over valid voxels.
    pub fn new(dims: Dims, values: Vec<f64>) -> Result<Self> {
        Self::with_mask(dims, values, None)
    }

    pub fn with_mask(dims: Dims, values: Vec<f64>, mask: Option<Vec<bool>>) -> Result<Self> {
        if values.len() != dims.len() {
            return Err(Error::Input(format!(
                "expected {} values for dims {:?}, got {}",
                dims.len(),
                dims.0,
                values.len()
            )));
        }
        if let Some(m) = &mask {
            if m.len() != dims.len() {
                return Err(Error::shape(&[dims.len()], &[m.len()]));
            }
        }
        let mut v = Volume {
            dims,
            values,
            value_range: (0.0, 0.0),
            mask,
            name: String::new(),
        };
        v.value_range = v.valid_range();
        Ok(v)
    }

    pub fn from_fn(dims: Dims, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(dims.len());
        for k in 0..dims.nz() {
            for j in 0..dims.ny() {
                for i in 0..dims.nx() {
                    values.push(f(i, j, k));
                }
            }
        }
        Self::new(dims, values).expect("length matches dims")
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    #[inline]
    pub fn is_valid(&self, idx: usize) -> bool {
        self.mask.as_ref().is_none_or(|m| m[idx])
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.dims.index(i, j, k)]
    }

    pub fn valid_count(&self) -> usize {
        match &self.mask {
            Some(m) => m.iter().filter(|&&b| b).count(),
            None => self.values.len(),
        }
    }

    /// Min and max over valid voxels; `(0, 0)` when nothing is valid.
    fn valid_range(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for (idx, &x) in self.values.iter().enumerate() {
            if self.is_valid(idx) {
                lo = lo.min(x);
                hi = hi.max(x);
            }
        }
        if lo > hi {
            (0.0, 0.0)
        } else {
            (lo, hi)
        }
    }

    /// Size of the volume when stored as f32, the convention for size ratios.
    pub fn raw_bytes_f32(&self) -> usize {
        self.values.len() * 4
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NormalizationScheme {
    #[default]
    Minmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationParams {
    pub vmin: f64,
    pub vmax: f64,
    #[serde(default)]
    pub scheme: NormalizationScheme,
}

impl NormalizationParams {
    pub fn new(vmin: f64, vmax: f64) -> Result<Self> {
        if !(vmin < vmax) {
            return Err(Error::DegenerateRange { vmin, vmax });
        }
        Ok(NormalizationParams {
            vmin,
            vmax,
            scheme: NormalizationScheme::Minmax,
        })
    }

    #[inline]
    pub fn forward(&self, x: f64) -> f64 {
        (x - self.vmin) / (self.vmax - self.vmin)
    }

    #[inline]
    pub fn inverse(&self, y: f64) -> f64 {
        self.vmin + y * (self.vmax - self.vmin)
    }

    pub fn range(&self) -> f64 {
        self.vmax - self.vmin
    }
}

pub fn load_raw(path: impl AsRef<Path>, dims: Dims, dtype: Dtype) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let expected = dims.len() * dtype.size();
    if bytes.len() != expected {
        return Err(Error::Input(format!(
            "{}: size {} bytes does not match dims {:?} x {} bytes = {}",
            path.display(),
            bytes.len(),
            dims.0,
            dtype.size(),
            expected
        )));
    }
    let values: Vec<f64> = match dtype {
        Dtype::F32le => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
        Dtype::F64le => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    let mask = if values.iter().all(|x| x.is_finite()) {
        None
    } else {
        Some(values.iter().map(|x| x.is_finite()).collect())
    };
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Volume::with_mask(dims, values, mask)?.named(name))
}

pub fn save_raw(v: &Volume, path: impl AsRef<Path>, dtype: Dtype) -> Result<()> {
    let path = path.as_ref();
    if path.as_os_str().is_empty() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::InvalidInput,
            "empty output path",
        )));
    }
    let mut out = Vec::with_capacity(v.values.len() * dtype.size());
    match dtype {
        Dtype::F32le => {
            for &x in &v.values {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        Dtype::F64le => {
            for &x in &v.values {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Maps valid voxels affinely onto `[0, 1]`; masked voxels become 0.
pub fn normalize(v: &Volume) -> Result<(Volume, NormalizationParams)> {
    let (vmin, vmax) = v.value_range;
    if v.valid_count() == 0 {
        return Err(Error::DegenerateRange { vmin, vmax });
    }
    let params = NormalizationParams::new(vmin, vmax)?;
    Ok((normalize_with(v, &params), params))
}

/// Normalizes with externally supplied parameters. Values outside the
/// parameter range map outside `[0, 1]`.
pub fn normalize_with(v: &Volume, params: &NormalizationParams) -> Volume {
    let values = v
        .values
        .iter()
        .enumerate()
        .map(|(idx, &x)| {
            if v.is_valid(idx) {
                params.forward(x)
            } else {
                0.0
            }
        })
        .collect();
    let mut out = Volume::with_mask(v.dims, values, v.mask.clone()).expect("same dims");
    out.name = v.name.clone();
    out
}

pub fn denormalize(v: &Volume, params: &NormalizationParams) -> Volume {
    let values = v.values.iter().map(|&y| params.inverse(y)).collect();
    let mut out = Volume::with_mask(v.dims, values, v.mask.clone()).expect("same dims");
    out.name = v.name.clone();
    out
}

/// Marks voxels equal to `sentinel` invalid and recomputes the value range.
pub fn apply_sentinel_mask(v: Volume, sentinel: f64) -> Volume {
    let hits: Vec<bool> = v.values.iter().map(|&x| x == sentinel).collect();
    if !hits.iter().any(|&h| h) {
        return v;
    }
    let mut mask = v.mask.unwrap_or_else(|| vec![true; v.values.len()]);
    for (m, h) in mask.iter_mut().zip(hits) {
        if h {
            *m = false;
        }
    }
    let name = v.name;
    let mut out = Volume::with_mask(v.dims, v.values, Some(mask)).expect("same dims");
    out.name = name;
    out
}

/// Sum of `count` isotropic Gaussian bumps plus uniform noise.
///
/// Centres are uniform over the domain, widths uniform in `[1.5, 4)` voxels
/// and amplitudes uniform in `[-1, 1)`; the noise is uniform in
/// `[-noise, noise)`. Fully determined by `seed`.
pub fn synthetic_blobs(dims: Dims, count: usize, noise: f64, seed: u64) -> Volume {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let ext = [dims.nx() as f64, dims.ny() as f64, dims.nz() as f64];
    let blobs: Vec<([f64; 3], f64, f64)> = (0..count)
        .map(|_| {
            let c = [
                rng.gen_range(0.0..ext[0]),
                rng.gen_range(0.0..ext[1]),
                rng.gen_range(0.0..ext[2]),
            ];
            (c, rng.gen_range(1.5..4.0), rng.gen_range(-1.0..1.0))
        })
        .collect();
    let mut v = Volume::from_fn(dims, |i, j, k| {
        blobs
            .iter()
            .map(|(c, s, a)| {
                let d2 = (i as f64 - c[0]).powi(2)
                    + (j as f64 - c[1]).powi(2)
                    + (k as f64 - c[2]).powi(2);
                a * (-0.5 * d2 / (s * s)).exp()
            })
            .sum()
    });
    if noise > 0.0 {
        for x in &mut v.values {
            *x += rng.gen_range(-noise..noise);
        }
    }
    Volume::new(dims, v.values).expect("same dims")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_index_is_a_bijection() {
        for nx in 1..=4 {
            for ny in 1..=4 {
                for nz in 1..=4 {
                    let d = Dims::new(nx, ny, nz);
                    let mut seen = vec![false; d.len()];
                    for k in 0..nz {
                        for j in 0..ny {
                            for i in 0..nx {
                                let idx = d.index(i, j, k);
                                assert!(!seen[idx]);
                                seen[idx] = true;
                                assert_eq!(d.coords(idx), (i, j, k));
                            }
                        }
                    }
                    assert!(seen.iter().all(|&s| s));
                }
            }
        }
    }

    #[test]
    fn normalize_maps_to_unit_interval() {
        let v = Volume::new(Dims::new(3, 1, 1), vec![2.0, 4.0, 6.0]).unwrap();
        let (n, p) = normalize(&v).unwrap();
        assert_eq!(n.values, vec![0.0, 0.5, 1.0]);
        assert_eq!((p.vmin, p.vmax), (2.0, 6.0));
    }

    #[test]
    fn normalize_identity_on_unit_range() {
        let vals = vec![0.0, 0.25, 1.0, 0.5];
        let v = Volume::new(Dims::new(4, 1, 1), vals.clone()).unwrap();
        let (n, _) = normalize(&v).unwrap();
        assert_eq!(n.values, vals);
    }

    #[test]
    fn constant_field_is_degenerate() {
        let v = Volume::new(Dims::new(3, 1, 1), vec![5.0; 3]).unwrap();
        assert!(matches!(normalize(&v), Err(Error::DegenerateRange { .. })));
    }

    #[test]
    fn sentinel_mask() {
        let v = Volume::new(Dims::new(3, 1, 1), vec![1.0, 1e35, 2.0]).unwrap();
        let m = apply_sentinel_mask(v, 1e35);
        assert_eq!(m.mask, Some(vec![true, false, true]));
        assert_eq!(m.value_range, (1.0, 2.0));
        let (n, _) = normalize(&m).unwrap();
        assert_eq!(n.values, vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn sentinel_absent_leaves_mask_alone() {
        let v = Volume::new(Dims::new(3, 1, 1), vec![1.0, 2.0, 3.0]).unwrap();
        let m = apply_sentinel_mask(v.clone(), 1e35);
        assert_eq!(m, v);
    }

    #[test]
    fn all_sentinel_fails_normalize() {
        let v = Volume::new(Dims::new(2, 1, 1), vec![1e35, 1e35]).unwrap();
        let m = apply_sentinel_mask(v, 1e35);
        assert_eq!(m.valid_count(), 0);
        assert!(matches!(normalize(&m), Err(Error::DegenerateRange { .. })));
    }

    #[test]
    fn parse_dims() {
        assert_eq!(Dims::parse("32, 16,8").unwrap(), Dims::new(32, 16, 8));
        assert!(Dims::parse("32,16").is_err());
        assert!(Dims::parse("0,1,1").is_err());
    }
}
