//! Lossless coding of quantized latents and the `IDLT` file format.
//!
//! Each block stores its hyper-latent `z` (coded under the learned factorized
//! density) followed by its latent `y` (coded under per-element Gaussians
//! whose parameters are predicted from the decoded `z`).

mod rans;

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blocking::{partition, reassemble, BlockIndex, BlockSpec};
use crate::error::{Error, Result};
use crate::importance::ImportanceMap;
use crate::network::{gaussian, hex, quantize, Model, ModelHash};
use crate::nn::Tensor;
use crate::volume::{denormalize, normalize_with, Dims, NormalizationParams, Volume};

pub use rans::{
    decode_with_tables, encode_with_tables, entropy_decode, entropy_encode, ideal_bits, FreqTable,
    Pmf, PROB_BITS, PROB_SCALE,
};

/// Smallest and largest latent symbol.
pub const ALPHABET_MIN: i32 = -127;
pub const ALPHABET_MAX: i32 = 127;

const MAGIC: &[u8; 4] = b"IDLT";
const VERSION: u8 = 1;
pub const HEADER_BYTES: usize = 4 + 1 + 12 + 8 + 8 + 16 + 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub dims: Dims,
    pub spec: BlockSpec,
    pub latent_channels: usize,
    pub latent_spatial: usize,
    pub normalization: NormalizationParams,
    pub model_hash: ModelHash,
    pub block_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockRecord {
    pub z: Vec<u8>,
    pub y: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedVolume {
    pub header: Header,
    /// In grid order, x fastest.
    pub blocks: Vec<BlockRecord>,
}

/// Quantized symbols of one block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentBlock {
    pub block_index: BlockIndex,
    pub y_symbols: Vec<i32>,
    pub z_symbols: Vec<i32>,
}

impl LatentBlock {
    pub fn y_tensor(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(
            shape.to_vec(),
            self.y_symbols.iter().map(|&s| s as f32).collect(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EncodeStats {
    /// Latent values rounded outside the alphabet and clamped into it.
    pub clamped_y: usize,
    pub clamped_z: usize,
    /// `sum -log2 p` over all coded symbols under the unquantized model.
    pub ideal_bits: f64,
    /// Payload bits actually written, excluding header and length fields.
    pub payload_bits: usize,
}

fn put_u16(out: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v = u16::try_from(v)
        .map_err(|_| Error::InvalidArgument(format!("{what} {v} does not fit in 16 bits")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_u32(out: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v)
        .map_err(|_| Error::InvalidArgument(format!("{what} {v} does not fit in 32 bits")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, block: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Bitstream {
                block,
                reason: format!("truncated while reading {what}"),
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<usize> {
        Ok(u16::from_le_bytes(self.take(2, 0, what)?.try_into().unwrap()) as usize)
    }

    fn u32(&mut self, block: usize, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, block, what)?.try_into().unwrap()) as usize)
    }

    fn f32(&mut self, what: &str) -> Result<f64> {
        Ok(f32::from_le_bytes(self.take(4, 0, what)?.try_into().unwrap()) as f64)
    }
}

impl CompressedVolume {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let h = &self.header;
        if h.block_count != self.blocks.len() {
            return Err(Error::InvalidArgument(
                "block count does not match records".into(),
            ));
        }
        let mut out = Vec::with_capacity(self.byte_len());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        for &n in &h.dims.0 {
            put_u32(&mut out, n, "dimension")?;
        }
        put_u16(&mut out, h.spec.content, "content")?;
        put_u16(&mut out, h.spec.pad, "pad")?;
        put_u16(&mut out, h.latent_channels, "latent channels")?;
        put_u16(&mut out, h.latent_spatial, "latent spatial size")?;
        out.extend_from_slice(&(h.normalization.vmin as f32).to_le_bytes());
        out.extend_from_slice(&(h.normalization.vmax as f32).to_le_bytes());
        out.extend_from_slice(&h.model_hash);
        put_u32(&mut out, h.block_count, "block count")?;
        for b in &self.blocks {
            put_u32(&mut out, b.z.len(), "payload length")?;
            put_u32(&mut out, b.y.len(), "payload length")?;
            out.extend_from_slice(&b.z);
            out.extend_from_slice(&b.y);
        }
        Ok(out)
    }

    /// Size of the serialized file in bytes.
    pub fn byte_len(&self) -> usize {
        HEADER_BYTES
            + self
                .blocks
                .iter()
                .map(|b| 8 + b.z.len() + b.y.len())
                .sum::<usize>()
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        let header = read_header_from(&mut r)?;
        let expected = header.spec.block_count(header.dims);
        if header.block_count != expected {
            return Err(Error::Input(format!(
                "header block count {} does not match grid ({expected})",
                header.block_count
            )));
        }
        let mut blocks = Vec::with_capacity(header.block_count);
        for i in 0..header.block_count {
            let zl = r.u32(i, "z length")?;
            let yl = r.u32(i, "y length")?;
            let z = r.take(zl, i, "z payload")?.to_vec();
            let y = r.take(yl, i, "y payload")?.to_vec();
            blocks.push(BlockRecord { z, y });
        }
        if r.pos != buf.len() {
            return Err(Error::Input(format!(
                "{} trailing bytes",
                buf.len() - r.pos
            )));
        }
        Ok(CompressedVolume { header, blocks })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn read_header_from(r: &mut Reader) -> Result<Header> {
    if r.take(4, 0, "magic")
        .map_err(|_| Error::Input("file too short".into()))?
        != MAGIC
    {
        return Err(Error::Input("not an IDLT file".into()));
    }
    let version = r.take(1, 0, "version")?[0];
    if version != VERSION {
        return Err(Error::Input(format!("unsupported IDLT version {version}")));
    }
    let dims = Dims([r.u32(0, "dims")?, r.u32(0, "dims")?, r.u32(0, "dims")?]);
    let content = r.u16("content")?;
    let pad = r.u16("pad")?;
    let spec = BlockSpec::new(content, pad).map_err(|e| Error::Input(e.to_string()))?;
    let latent_channels = r.u16("K")?;
    let latent_spatial = r.u16("latent spatial")?;
    let vmin = r.f32("vmin")?;
    let vmax = r.f32("vmax")?;
    let normalization = NormalizationParams::new(vmin, vmax)?;
    let mut model_hash = [0u8; 16];
    model_hash.copy_from_slice(r.take(16, 0, "model hash")?);
    let block_count = r.u32(0, "block count")?;
    Ok(Header {
        dims,
        spec,
        latent_channels,
        latent_spatial,
        normalization,
        model_hash,
        block_count,
    })
}

/// Parses only the fixed-size header.
pub fn read_header(buf: &[u8]) -> Result<Header> {
    read_header_from(&mut Reader { buf, pos: 0 })
}

fn clamp_symbol(v: f32, clamped: &mut usize) -> i32 {
    let s = v as i64;
    if s < ALPHABET_MIN as i64 || s > ALPHABET_MAX as i64 {
        *clamped += 1;
    }
    s.clamp(ALPHABET_MIN as i64, ALPHABET_MAX as i64) as i32
}

/// Frequency tables for the hyper-latent, one per element (channel).
fn z_tables(model: &Model) -> Result<Vec<FreqTable>> {
    let d = model.density();
    (0..d.channels())
        .map(|c| {
            FreqTable::from_pmf(
                &Pmf::new(ALPHABET_MIN, d.pmf(c, ALPHABET_MIN, ALPHABET_MAX)).normalized()?,
            )
        })
        .collect()
}

fn y_pmfs(model: &Model, z_symbols: &[i32]) -> Result<Vec<Pmf>> {
    let z = Tensor::new(
        vec![z_symbols.len()],
        z_symbols.iter().map(|&s| s as f32).collect(),
    )?;
    let (mean, scale) = model.entropy_params(&z)?;
    mean.data
        .iter()
        .zip(&scale.data)
        .map(|(&m, &s)| {
            Pmf::new(
                ALPHABET_MIN,
                gaussian::pmf(m as f64, s as f64, ALPHABET_MIN, ALPHABET_MAX),
            )
            .normalized()
        })
        .collect()
}

struct EncodedBlock {
    record: BlockRecord,
    latent: LatentBlock,
    stats: EncodeStats,
}

fn encode_block(
    model: &Model,
    index: BlockIndex,
    values: &[f64],
    importance: &[f64],
    zt: &[FreqTable],
) -> Result<EncodedBlock> {
    let mut stats = EncodeStats::default();
    let y = model.encode(values, importance)?;
    let z = model.hyper_encode(&y)?;
    let z_symbols: Vec<i32> = quantize(&z)
        .data
        .iter()
        .map(|&v| clamp_symbol(v, &mut stats.clamped_z))
        .collect();
    let y_symbols: Vec<i32> = quantize(&y)
        .data
        .iter()
        .map(|&v| clamp_symbol(v, &mut stats.clamped_y))
        .collect();
    let pmfs = y_pmfs(model, &z_symbols)?;
    let yt = pmfs
        .iter()
        .map(FreqTable::from_pmf)
        .collect::<Result<Vec<_>>>()?;
    let zb = encode_with_tables(&z_symbols, zt)?;
    let yb = encode_with_tables(&y_symbols, &yt)?;
    let d = model.density();
    stats.ideal_bits = ideal_bits(&y_symbols, &pmfs)
        + z_symbols
            .iter()
            .enumerate()
            .map(|(c, &s)| -d.likelihood(c, s as f64).log2())
            .sum::<f64>();
    stats.payload_bits = 8 * (zb.len() + yb.len());
    Ok(EncodedBlock {
        record: BlockRecord { z: zb, y: yb },
        latent: LatentBlock {
            block_index: index,
            y_symbols,
            z_symbols,
        },
        stats,
    })
}

/// Normalization a file will use: the model's training parameters when it
/// has them, otherwise the volume's own range. Rounded to `f32` because the
/// header stores them that way.
pub fn file_normalization(v: &Volume, model: &Model) -> Result<NormalizationParams> {
    let p = match model.normalization {
        Some(p) => p,
        None => NormalizationParams::new(v.value_range.0, v.value_range.1)?,
    };
    NormalizationParams::new(p.vmin as f32 as f64, p.vmax as f32 as f64)
}

/// Compresses a volume under an importance map.
pub fn compress_volume(
    v: &Volume,
    importance: &ImportanceMap,
    model: &Model,
) -> Result<(CompressedVolume, EncodeStats)> {
    let (file, _, stats) = compress_with_latents(v, importance, model)?;
    Ok((file, stats))
}

/// Like [`compress_volume`], also returning the quantized symbols written.
pub fn compress_with_latents(
    v: &Volume,
    importance: &ImportanceMap,
    model: &Model,
) -> Result<(CompressedVolume, Vec<LatentBlock>, EncodeStats)> {
    let spec = model.block_spec;
    let norm = file_normalization(v, model)?;
    let normalized = normalize_with(v, &norm);
    let blocks = partition(&normalized, importance, &spec)?;
    let zt = z_tables(model)?;
    let encoded = blocks
        .par_iter()
        .map(|b| encode_block(model, b.index, &b.values, &b.importance, &zt))
        .collect::<Result<Vec<_>>>()?;
    let mut stats = EncodeStats::default();
    let mut records = Vec::with_capacity(encoded.len());
    let mut latents = Vec::with_capacity(encoded.len());
    for e in encoded {
        stats.clamped_y += e.stats.clamped_y;
        stats.clamped_z += e.stats.clamped_z;
        stats.ideal_bits += e.stats.ideal_bits;
        stats.payload_bits += e.stats.payload_bits;
        records.push(e.record);
        latents.push(e.latent);
    }
    if stats.clamped_y + stats.clamped_z > 0 {
        log::warn!(
            "{} latent symbols clamped into the alphabet",
            stats.clamped_y + stats.clamped_z
        );
    }
    let header = Header {
        dims: v.dims,
        spec,
        latent_channels: model.config.latent_channels,
        latent_spatial: model.config.latent_spatial(),
        normalization: norm,
        model_hash: model.hash(),
        block_count: records.len(),
    };
    Ok((
        CompressedVolume {
            header,
            blocks: records,
        },
        latents,
        stats,
    ))
}

fn check_model(header: &Header, model: &Model) -> Result<()> {
    let hash = model.hash();
    if hash != header.model_hash {
        return Err(Error::HashMismatch {
            file: hex(&header.model_hash),
            model: hex(&hash),
        });
    }
    if header.spec != model.block_spec
        || header.latent_channels != model.config.latent_channels
        || header.latent_spatial != model.config.latent_spatial()
    {
        return Err(Error::Model(
            "file geometry does not match the model".into(),
        ));
    }
    Ok(())
}

/// Entropy-decodes every block's symbols. The model supplies the
/// probability tables, so it must be the one the file was written with.
pub fn decompress_latents(file: &CompressedVolume, model: &Model) -> Result<Vec<LatentBlock>> {
    check_model(&file.header, model)?;
    let zt = z_tables(model)?;
    let indices = file.header.spec.indices(file.header.dims);
    file.blocks
        .par_iter()
        .zip(indices)
        .enumerate()
        .map(|(i, (rec, index))| {
            let with_block = |e: Error| match e {
                Error::Bitstream { reason, .. } => Error::Bitstream { block: i, reason },
                other => other,
            };
            let z_symbols = decode_with_tables(&rec.z, &zt).map_err(with_block)?;
            let yt = y_pmfs(model, &z_symbols)?
                .iter()
                .map(FreqTable::from_pmf)
                .collect::<Result<Vec<_>>>()?;
            let y_symbols = decode_with_tables(&rec.y, &yt).map_err(with_block)?;
            Ok(LatentBlock {
                block_index: index,
                y_symbols,
                z_symbols,
            })
        })
        .collect()
}

/// Decodes latents into padded blocks, stitches them and undoes the
/// normalization recorded in the header.
pub fn decode_latents(latents: &[LatentBlock], header: &Header, model: &Model) -> Result<Volume> {
    let shape = model.config.latent_shape();
    let decoded = latents
        .par_iter()
        .map(|l| Ok((l.block_index, model.decode(&l.y_tensor(&shape)?)?.to_f64())))
        .collect::<Result<Vec<_>>>()?;
    let v = reassemble(
        decoded.iter().map(|(i, d)| (*i, d.as_slice())),
        &header.spec,
        header.dims,
    )?;
    Ok(denormalize(&v, &header.normalization))
}

pub fn decompress_volume(file: &CompressedVolume, model: &Model) -> Result<Volume> {
    let latents = decompress_latents(file, model)?;
    decode_latents(&latents, &file.header, model)
}

/// Original size over compressed size.
pub fn latent_size_ratio(original_bytes: u64, file_bytes: u64) -> Result<f64> {
    if original_bytes == 0 || file_bytes == 0 {
        return Err(Error::InvalidArgument("sizes must be positive".into()));
    }
    Ok(original_bytes as f64 / file_bytes as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::ModelConfig;

    fn model() -> Model {
        Model::new(ModelConfig::desk(4), BlockSpec::new(8, 2).unwrap()).unwrap()
    }

    fn field(n: [usize; 3]) -> Volume {
        Volume::from_fn(Dims(n), |i, j, k| {
            (i as f64 * 0.4).sin() + (j as f64 * 0.25).cos() * k as f64 * 0.1
        })
    }

    #[test]
    fn lsr_examples() {
        assert_eq!(latent_size_ratio(10, 10).unwrap(), 1.0);
        assert_eq!(latent_size_ratio(10, 20).unwrap(), 0.5);
        let r = latent_size_ratio(8_388_608, 78_112).unwrap();
        assert!((r - 107.392).abs() < 1e-3, "{r}");
        let fixed = latent_size_ratio(16 * 16 * 16 * 4, 8 * 27 * 4).unwrap();
        assert!((fixed - 18.963).abs() < 1e-3, "{fixed}");
        assert!(latent_size_ratio(10, 0).is_err());
    }

    #[test]
    fn round_trip_is_lossless_and_deterministic() {
        let m = model();
        let v = field([13, 9, 17]);
        let imp = ImportanceMap::constant(v.dims, 0.7);
        let (file, latents, stats) = compress_with_latents(&v, &imp, &m).unwrap();
        assert_eq!(file.header.block_count, 2 * 2 * 3);
        let bytes = file.to_bytes().unwrap();
        assert_eq!(bytes.len(), file.byte_len());
        let back = CompressedVolume::from_bytes(&bytes).unwrap();
        assert_eq!(back, file);
        assert_eq!(decompress_latents(&back, &m).unwrap(), latents);
        let again = compress_volume(&v, &imp, &m).unwrap().0.to_bytes().unwrap();
        assert_eq!(again, bytes);
        assert!(stats.payload_bits as f64 >= stats.ideal_bits);
        let out = decompress_volume(&back, &m).unwrap();
        assert_eq!(out.dims, v.dims);
        let direct = decode_latents(&latents, &file.header, &m).unwrap();
        assert_eq!(direct.values, out.values);
    }

    #[test]
    fn rejects_wrong_model_and_truncation() {
        let m = model();
        let v = field([8, 8, 8]);
        let (file, _) = compress_volume(&v, &ImportanceMap::constant(v.dims, 1.0), &m).unwrap();
        let mut other = m.clone();
        other.params.tensors[0].data[0] += 0.5;
        assert!(matches!(
            decompress_latents(&file, &other),
            Err(Error::HashMismatch { .. })
        ));
        let bytes = file.to_bytes().unwrap();
        match CompressedVolume::from_bytes(&bytes[..bytes.len() - 1]) {
            Err(Error::Bitstream { block, .. }) => assert_eq!(block, 0),
            other => panic!("{other:?}"),
        }
        assert!(CompressedVolume::from_bytes(&bytes[..10]).is_err());
        assert!(read_header(b"XXXX").is_err());
        let h = read_header(&bytes).unwrap();
        assert_eq!(h, file.header);
    }

    #[test]
    fn clamps_out_of_range_symbols() {
        let mut n = 0;
        assert_eq!(clamp_symbol(300.0, &mut n), 127);
        assert_eq!(clamp_symbol(-300.0, &mut n), -127);
        assert_eq!(clamp_symbol(5.0, &mut n), 5);
        assert_eq!(n, 2);
    }
}
