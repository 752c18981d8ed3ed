//! Analysis directly on block latents: spectral clustering into a
//! hierarchical tree, t-SNE projection, and isosurface similarity.

mod cluster;
mod iso;
mod tsne;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::blocking::BlockIndex;
use crate::codec::LatentBlock;
use crate::error::{Error, Result};
use crate::network::ModelHash;

pub use cluster::{spectral_cluster, ClusterNode, ClusterTree, NodeId};
pub use iso::{
    cosine_similarity, gradient_kde, isosurface_repr, parse_isovalues, select_representatives,
    similarity_from_reprs, similarity_map, GradientKde, SimilarityMap,
};
pub use tsne::{project_2d, Embedding2D, TsneConfig};

const SIDECAR_MAGIC: &[u8; 4] = b"IDLS";

/// One flattened latent vector per block, in block order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentTable {
    pub model_hash: ModelHash,
    /// Free-form description of the importance map the latents were made with.
    pub importance: String,
    pub block_indices: Vec<BlockIndex>,
    pub rows: Vec<Vec<f64>>,
}

impl LatentTable {
    pub fn new(
        model_hash: ModelHash,
        importance: impl Into<String>,
        block_indices: Vec<BlockIndex>,
        rows: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let t = LatentTable {
            model_hash,
            importance: importance.into(),
            block_indices,
            rows,
        };
        t.validate()?;
        Ok(t)
    }

    /// Uses the dequantized `y` symbols of each block as its row.
    pub fn from_latents(
        latents: &[LatentBlock],
        model_hash: ModelHash,
        importance: impl Into<String>,
    ) -> Result<Self> {
        Self::new(
            model_hash,
            importance,
            latents.iter().map(|l| l.block_index).collect(),
            latents
                .iter()
                .map(|l| l.y_symbols.iter().map(|&s| s as f64).collect())
                .collect(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows.len() != self.block_indices.len() {
            return Err(Error::Analysis("row and index counts differ".into()));
        }
        if let Some(first) = self.rows.first() {
            if self.rows.iter().any(|r| r.len() != first.len()) {
                return Err(Error::Analysis("rows have different lengths".into()));
            }
        }
        let mut seen = std::collections::HashSet::new();
        if !self.block_indices.iter().all(|b| seen.insert(*b)) {
            return Err(Error::Analysis("duplicate block index".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row_len(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    /// Binary sidecar: magic, row length and row count (`u32`), model hash,
    /// descriptor length and UTF-8 bytes, then per row its block index
    /// (3 `u32`) and `f32` values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(SIDECAR_MAGIC);
        out.extend_from_slice(&(self.row_len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.model_hash);
        out.extend_from_slice(&(self.importance.len() as u32).to_le_bytes());
        out.extend_from_slice(self.importance.as_bytes());
        for (idx, row) in self.block_indices.iter().zip(&self.rows) {
            for &c in idx {
                out.extend_from_slice(&(c as u32).to_le_bytes());
            }
            for &v in row {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Input(format!("latent sidecar: {m}"));
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = buf.get(pos..pos + n).ok_or_else(|| bad("truncated"))?;
            pos += n;
            Ok(s)
        };
        if take(4)? != SIDECAR_MAGIC {
            return Err(bad("bad magic"));
        }
        let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap()) as usize;
        let row_len = u32_at(take(4)?);
        let count = u32_at(take(4)?);
        let mut model_hash = [0u8; 16];
        model_hash.copy_from_slice(take(16)?);
        let dlen = u32_at(take(4)?);
        let importance =
            String::from_utf8(take(dlen)?.to_vec()).map_err(|_| bad("descriptor is not UTF-8"))?;
        let mut block_indices = Vec::with_capacity(count);
        let mut rows = Vec::with_capacity(count);
        for _ in 0..count {
            let ib = take(12)?;
            block_indices.push([u32_at(&ib[0..4]), u32_at(&ib[4..8]), u32_at(&ib[8..12])]);
            let rb = take(4 * row_len)?;
            rows.push(
                rb.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
            );
        }
        if pos != buf.len() {
            return Err(bad("trailing bytes"));
        }
        Self::new(model_hash, importance, block_indices, rows)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Path of the sidecar that accompanies an `IDLT` file.
pub fn sidecar_path(idlt: &Path) -> std::path::PathBuf {
    let mut name = idlt.as_os_str().to_owned();
    name.push(".latents");
    name.into()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> LatentTable {
        LatentTable::new(
            [7; 16],
            "region 0,0,0:4,4,4",
            vec![[0, 0, 0], [1, 0, 0]],
            vec![vec![1.0, -2.0, 3.0], vec![0.0, 5.0, -127.0]],
        )
        .unwrap()
    }

    #[test]
    fn sidecar_round_trip() {
        let t = table();
        let back = LatentTable::from_bytes(&t.to_bytes()).unwrap();
        assert_eq!(back, t);
        let bytes = t.to_bytes();
        assert!(LatentTable::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let dir = tempfile::tempdir().unwrap();
        let p = sidecar_path(&dir.path().join("v.idlt"));
        assert!(p.to_string_lossy().ends_with("v.idlt.latents"));
        t.save(&p).unwrap();
        assert_eq!(LatentTable::load(&p).unwrap(), t);
    }

    #[test]
    fn rejects_ragged_or_duplicate_rows() {
        assert!(LatentTable::new(
            [0; 16],
            "",
            vec![[0, 0, 0], [1, 0, 0]],
            vec![vec![1.0], vec![1.0, 2.0]]
        )
        .is_err());
        assert!(LatentTable::new(
            [0; 16],
            "",
            vec![[0, 0, 0], [0, 0, 0]],
            vec![vec![1.0], vec![2.0]]
        )
        .is_err());
    }
}
