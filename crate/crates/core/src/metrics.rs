//! Importance-weighted reconstruction quality.
//!
//! All metrics run in the original (denormalized) units of the volume and
//! skip masked voxels.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::codec::latent_size_ratio;
use crate::error::{Error, Result};
use crate::importance::ImportanceMap;
use crate::volume::Volume;

/// Threshold splitting a continuous map into important and unimportant voxels.
pub const IMPORTANT_THRESHOLD: f64 = 0.5;

fn check(x: &Volume, x_tilde: &Volume, importance: &ImportanceMap) -> Result<()> {
    if x.dims != x_tilde.dims {
        return Err(Error::shape(&x.dims.0, &x_tilde.dims.0));
    }
    if x.dims != importance.dims {
        return Err(Error::shape(&x.dims.0, &importance.dims.0));
    }
    Ok(())
}

/// Weighted sum of squared errors and the weight total, over valid voxels
/// selected by `keep`.
fn weighted_sums(
    x: &Volume,
    x_tilde: &Volume,
    weight: impl Fn(usize) -> f64,
    keep: impl Fn(usize) -> bool,
) -> (f64, f64) {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..x.values.len() {
        if !x.is_valid(i) || !keep(i) {
            continue;
        }
        let w = weight(i);
        let d = x.values[i] - x_tilde.values[i];
        num += w * d * d;
        den += w;
    }
    (num, den)
}

/// `sum I (x - x̃)^2 / sum I` over valid voxels.
pub fn wmse(x: &Volume, x_tilde: &Volume, importance: &ImportanceMap) -> Result<f64> {
    check(x, x_tilde, importance)?;
    let (num, den) = weighted_sums(x, x_tilde, |i| importance.values[i], |_| true);
    if den <= 0.0 {
        return Err(Error::InvalidArgument(
            "importance sums to zero over valid voxels".into(),
        ));
    }
    Ok(num / den)
}

/// Peak signal-to-noise ratio in dB for value range `v`; infinite when the
/// error is zero.
pub fn psnr_from_wmse(wmse: f64, v: f64) -> Result<f64> {
    if !(v > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "value range must be positive, got {v}"
        )));
    }
    if wmse < 0.0 || wmse.is_nan() {
        return Err(Error::InvalidArgument(format!("invalid wMSE {wmse}")));
    }
    if wmse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (v * v / wmse).log10())
}

pub fn psnr(x: &Volume, x_tilde: &Volume, importance: &ImportanceMap, v: f64) -> Result<f64> {
    psnr_from_wmse(wmse(x, x_tilde, importance)?, v)
}

fn ser_db<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() && *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

fn de_db<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Db {
        Num(f64),
        Text(String),
    }
    match Db::deserialize(d)? {
        Db::Num(x) => Ok(x),
        Db::Text(t) if t == "inf" => Ok(f64::INFINITY),
        Db::Text(t) => Err(serde::de::Error::custom(format!("bad dB value {t}"))),
    }
}

/// Error and PSNR for one region. PSNR serializes as the string `"inf"`
/// for a perfect reconstruction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionQuality {
    pub wmse: f64,
    #[serde(serialize_with = "ser_db", deserialize_with = "de_db")]
    pub psnr: f64,
    pub voxels: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionBreakdown {
    /// Voxels with importance above the threshold, weighted by importance.
    pub important: Option<RegionQuality>,
    /// The remaining voxels, unweighted, since their importance may be zero.
    pub unimportant: Option<RegionQuality>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub wmse: f64,
    #[serde(serialize_with = "ser_db", deserialize_with = "de_db")]
    pub psnr: f64,
    /// Present when the compressed file size is known.
    pub lsr: Option<f64>,
    /// Value range of the original volume used for PSNR.
    pub value_range: f64,
    pub region_breakdown: RegionBreakdown,
}

fn region(
    x: &Volume,
    x_tilde: &Volume,
    v: f64,
    weight: impl Fn(usize) -> f64,
    keep: impl Fn(usize) -> bool + Copy,
) -> Result<Option<RegionQuality>> {
    let voxels = (0..x.values.len())
        .filter(|&i| x.is_valid(i) && keep(i))
        .count();
    let (num, den) = weighted_sums(x, x_tilde, weight, keep);
    if voxels == 0 || den <= 0.0 {
        return Ok(None);
    }
    let wmse = num / den;
    Ok(Some(RegionQuality {
        wmse,
        psnr: psnr_from_wmse(wmse, v)?,
        voxels,
    }))
}

/// Full report. The value range comes from the original volume; a constant
/// original falls back to a range of 1.
pub fn report(
    x: &Volume,
    x_tilde: &Volume,
    importance: &ImportanceMap,
    file_bytes: Option<u64>,
) -> Result<MetricReport> {
    let w = wmse(x, x_tilde, importance)?;
    let range = x.value_range.1 - x.value_range.0;
    let v = if range > 0.0 { range } else { 1.0 };
    let imp = &importance.values;
    let important = region(x, x_tilde, v, |i| imp[i], |i| imp[i] > IMPORTANT_THRESHOLD)?;
    let unimportant = region(x, x_tilde, v, |_| 1.0, |i| imp[i] <= IMPORTANT_THRESHOLD)?;
    let lsr = file_bytes
        .map(|b| latent_size_ratio(x.raw_bytes_f32() as u64, b))
        .transpose()?;
    Ok(MetricReport {
        wmse: w,
        psnr: psnr_from_wmse(w, v)?,
        lsr,
        value_range: v,
        region_breakdown: RegionBreakdown {
            important,
            unimportant,
        },
    })
}
