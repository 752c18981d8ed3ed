//! Model checkpoints.
//!
//! Layout (little-endian): magic `IDLC`, version `u8`, header length `u32`,
//! JSON header, then every tensor's `f32` data in header order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::blocking::BlockSpec;
use crate::error::{Error, Result};
use crate::nn::{ParamGroup, ParamStore, Tensor};
use crate::volume::NormalizationParams;

use super::model::{Model, ModelConfig};

const MAGIC: &[u8; 4] = b"IDLC";
const VERSION: u8 = 1;

pub type ModelHash = [u8; 16];

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    group: ParamGroup,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    block_spec: BlockSpec,
    normalization: Option<NormalizationParams>,
    tensors: Vec<TensorEntry>,
}

fn tensor_bytes(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(store.scalar_count() * 4);
    for t in &store.tensors {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

impl Model {
    /// First 16 bytes of SHA-256 over the architecture and all weights.
    /// Normalization metadata does not contribute.
    pub fn hash(&self) -> ModelHash {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        h.update(serde_json::to_vec(&self.block_spec).expect("spec serializes"));
        for (name, t) in self.params.names.iter().zip(&self.params.tensors) {
            h.update(name.as_bytes());
            for d in &t.shape {
                h.update((*d as u64).to_le_bytes());
            }
        }
        h.update(tensor_bytes(&self.params));
        let digest = h.finalize();
        let mut out = [0u8; 16];
        out.copy_from_slice(&digest[..16]);
        out
    }

    pub fn hash_hex(&self) -> String {
        hex(&self.hash())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let header = Header {
            config: self.config.clone(),
            block_spec: self.block_spec,
            normalization: self.normalization,
            tensors: self
                .params
                .names
                .iter()
                .zip(&self.params.tensors)
                .zip(&self.params.groups)
                .map(|((name, t), g)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape.clone(),
                    group: *g,
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut buf = Vec::with_capacity(9 + json.len() + self.params.scalar_count() * 4);
        buf.extend_from_slice(MAGIC);
        buf.push(VERSION);
        buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
        buf.extend_from_slice(&json);
        buf.extend_from_slice(&tensor_bytes(&self.params));
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::File::create(path)?.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut buf = Vec::new();
        fs::File::open(path.as_ref())?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Input(format!("checkpoint: {m}"));
        if buf.len() < 9 || &buf[..4] != MAGIC {
            return Err(bad("bad magic"));
        }
        if buf[4] != VERSION {
            return Err(bad(&format!("unsupported version {}", buf[4])));
        }
        let len = u32::from_le_bytes(buf[5..9].try_into().unwrap()) as usize;
        let json = buf.get(9..9 + len).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(json)?;
        let mut rest = &buf[9 + len..];
        // Rebuild through the constructor so names and shapes are checked
        // against the architecture the config describes.
        let mut model = Model::new(header.config, header.block_spec)?;
        if model.params.len() != header.tensors.len() {
            return Err(bad("tensor count does not match architecture"));
        }
        for (i, entry) in header.tensors.iter().enumerate() {
            if model.params.names[i] != entry.name || model.params.tensors[i].shape != entry.shape {
                return Err(bad(&format!("unexpected tensor {}", entry.name)));
            }
            let n: usize = entry.shape.iter().product();
            if rest.len() < 4 * n {
                return Err(bad("truncated tensor data"));
            }
            let data = rest[..4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            model.params.tensors[i] = Tensor::new(entry.shape.clone(), data)?;
            rest = &rest[4 * n..];
        }
        if !rest.is_empty() {
            return Err(bad("trailing bytes"));
        }
        model.normalization = header.normalization;
        Ok(model)
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_weights_and_hash() {
        let mut m = Model::new(ModelConfig::desk(4), BlockSpec::new(8, 2).unwrap()).unwrap();
        m.normalization = Some(NormalizationParams::new(-1.0, 3.0).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/m.idlc");
        m.save(&p).unwrap();
        let back = Model::load(&p).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.hash(), m.hash());
    }

    #[test]
    fn hash_tracks_weights() {
        let a = Model::new(ModelConfig::desk(4), BlockSpec::new(8, 2).unwrap()).unwrap();
        let mut b = a.clone();
        b.params.tensors[0].data[0] += 1e-3;
        assert_ne!(a.hash(), b.hash());
        let mut c = a.clone();
        c.normalization = Some(NormalizationParams::new(0.0, 2.0).unwrap());
        assert_eq!(a.hash(), c.hash());
    }

    #[test]
    fn rejects_corruption() {
        let m = Model::new(ModelConfig::desk(4), BlockSpec::new(8, 2).unwrap()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.idlc");
        m.save(&p).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert!(Model::from_bytes(&bytes[..bytes.len() - 4]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Model::from_bytes(&bad).is_err());
        assert!(Model::load(dir.path().join("missing")).is_err());
    }
}
