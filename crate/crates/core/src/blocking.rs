//! Block decomposition of volumes.
//!
//! Each block owns a cubic content region of edge `content` and is padded by
//! `pad` voxels of real neighbouring data on every side. At the domain
//! boundary the padding replicates the edge voxels. Volumes whose dims are not
//! multiples of `content` get clipped content regions in the last block along
//! that axis.

use std::collections::HashSet;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::importance::ImportanceMap;
use crate::volume::{Dims, Volume};

pub type BlockIndex = [usize; 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub content: usize,
    pub pad: usize,
}

impl Default for BlockSpec {
    fn default() -> Self {
        BlockSpec {
            content: 16,
            pad: 4,
        }
    }
}

impl BlockSpec {
    pub fn new(content: usize, pad: usize) -> Result<Self> {
        let spec = BlockSpec { content, pad };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.content < 4 {
            return Err(Error::Block(format!(
                "content edge must be at least 4, got {}",
                self.content
            )));
        }
        Ok(())
    }

    pub fn padded(&self) -> usize {
        self.content + 2 * self.pad
    }

    pub fn padded_len(&self) -> usize {
        self.padded().pow(3)
    }

    pub fn grid_dims(&self, dims: Dims) -> [usize; 3] {
        dims.0.map(|n| n.div_ceil(self.content))
    }

    pub fn block_count(&self, dims: Dims) -> usize {
        self.grid_dims(dims).iter().product()
    }

    /// Grid indices in storage order (x fastest).
    pub fn indices(&self, dims: Dims) -> Vec<BlockIndex> {
        let g = self.grid_dims(dims);
        let mut out = Vec::with_capacity(g.iter().product());
        for bk in 0..g[2] {
            for bj in 0..g[1] {
                for bi in 0..g[0] {
                    out.push([bi, bj, bk]);
                }
            }
        }
        out
    }

    /// In-domain content sub-box of a block, as `(origin, extent)`.
    pub fn content_box(&self, dims: Dims, index: BlockIndex) -> ([usize; 3], [usize; 3]) {
        let origin = index.map(|b| b * self.content);
        let mut extent = [0; 3];
        for a in 0..3 {
            extent[a] = self.content.min(dims.0[a] - origin[a]);
        }
        (origin, extent)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataBlock {
    pub index: BlockIndex,
    pub values: Vec<f64>,
    pub importance: Vec<f64>,
    /// Per-voxel validity, present when the source volume carries a mask.
    pub valid: Option<Vec<bool>>,
    /// Extent of the in-domain content region, starting at offset `pad`.
    pub valid_extent: [usize; 3],
}

impl DataBlock {
    /// Content-region values (in-domain part only), x fastest.
    pub fn content_values(&self, spec: &BlockSpec) -> Vec<f64> {
        let e = spec.padded();
        let mut out = Vec::with_capacity(self.valid_extent.iter().product());
        for z in 0..self.valid_extent[2] {
            for y in 0..self.valid_extent[1] {
                for x in 0..self.valid_extent[0] {
                    let (px, py, pz) = (x + spec.pad, y + spec.pad, z + spec.pad);
                    out.push(self.values[px + e * (py + e * pz)]);
                }
            }
        }
        out
    }
}

fn gather(src: &[f64], dims: Dims, spec: &BlockSpec, index: BlockIndex) -> Vec<f64> {
    let e = spec.padded();
    let mut out = Vec::with_capacity(e * e * e);
    let coord = |axis: usize, t: usize| -> usize {
        let p = (index[axis] * spec.content + t) as i64 - spec.pad as i64;
        p.clamp(0, dims.0[axis] as i64 - 1) as usize
    };
    for z in 0..e {
        let k = coord(2, z);
        for y in 0..e {
            let j = coord(1, y);
            let row = dims.index(0, j, k);
            for x in 0..e {
                out.push(src[row + coord(0, x)]);
            }
        }
    }
    out
}

pub fn partition(
    v: &Volume,
    importance: &ImportanceMap,
    spec: &BlockSpec,
) -> Result<Vec<DataBlock>> {
    spec.validate()?;
    if importance.dims != v.dims {
        return Err(Error::shape(&v.dims.0, &importance.dims.0));
    }
    Ok(spec
        .indices(v.dims)
        .into_iter()
        .map(|index| DataBlock {
            index,
            values: gather(&v.values, v.dims, spec, index),
            importance: gather(&importance.values, v.dims, spec, index),
            valid: v.mask.as_ref().map(|m| {
                let as_f: Vec<f64> = m.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
                gather(&as_f, v.dims, spec, index)
                    .into_iter()
                    .map(|x| x > 0.5)
                    .collect()
            }),
            valid_extent: spec.content_box(v.dims, index).1,
        })
        .collect())
}

/// Stitches per-block reconstructions (padded edge) back into a volume by
/// copying each block's central content region.
pub fn reassemble<'a, I>(blocks: I, spec: &BlockSpec, dims: Dims) -> Result<Volume>
where
    I: IntoIterator<Item = (BlockIndex, &'a [f64])>,
{
    let g = spec.grid_dims(dims);
    let e = spec.padded();
    let mut seen: HashSet<BlockIndex> = HashSet::new();
    let mut values = vec![0.0; dims.len()];
    for (index, data) in blocks {
        if (0..3).any(|a| index[a] >= g[a]) {
            return Err(Error::Block(format!(
                "block index {index:?} outside grid {g:?}"
            )));
        }
        if data.len() != e * e * e {
            return Err(Error::shape(&[e * e * e], &[data.len()]));
        }
        if !seen.insert(index) {
            return Err(Error::Block(format!("duplicate block {index:?}")));
        }
        let (origin, extent) = spec.content_box(dims, index);
        for z in 0..extent[2] {
            for y in 0..extent[1] {
                let src = spec.pad + e * (y + spec.pad + e * (z + spec.pad));
                let dst = dims.index(origin[0], origin[1] + y, origin[2] + z);
                values[dst..dst + extent[0]].copy_from_slice(&data[src..src + extent[0]]);
            }
        }
    }
    if seen.len() != g.iter().product::<usize>() {
        let missing = spec
            .indices(dims)
            .into_iter()
            .find(|i| !seen.contains(i))
            .expect("count mismatch implies a missing index");
        return Err(Error::Block(format!("missing block {missing:?}")));
    }
    Volume::new(dims, values)
}

pub fn reassemble_blocks(blocks: &[DataBlock], spec: &BlockSpec, dims: Dims) -> Result<Volume> {
    reassemble(
        blocks.iter().map(|b| (b.index, b.values.as_slice())),
        spec,
        dims,
    )
}

/// Shannon entropy (bits) of the content-region histogram over `[0, 1]`,
/// the range of normalized data. Values outside are clamped to the end bins.
pub fn block_entropy(block: &DataBlock, spec: &BlockSpec, bins: usize) -> f64 {
    let bins = bins.max(2);
    let values = block.content_values(spec);
    let mut hist = vec![0usize; bins];
    for x in &values {
        let b = (x * bins as f64).floor();
        hist[(b.max(0.0) as usize).min(bins - 1)] += 1;
    }
    let n = values.len() as f64;
    hist.iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum::<f64>()
        .max(0.0)
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SamplingReport {
    pub high: usize,
    pub low: usize,
    /// Draws moved to the other side because one side ran short.
    pub backfilled: usize,
}

/// Complexity-aware sampling: blocks are split at the median entropy and
/// `n * rh / (rh + rl)` draws come from the high side, the rest from the low
/// side, without replacement.
pub fn sample_training_blocks(
    blocks: &[DataBlock],
    spec: &BlockSpec,
    n: usize,
    ratio: (usize, usize),
    bins: usize,
    seed: u64,
) -> Result<(Vec<DataBlock>, SamplingReport)> {
    if n == 0 {
        return Err(Error::InvalidArgument(
            "sample size must be positive".into(),
        ));
    }
    if n > blocks.len() {
        return Err(Error::InvalidArgument(format!(
            "requested {n} blocks, only {} available",
            blocks.len()
        )));
    }
    if ratio.0 + ratio.1 == 0 {
        return Err(Error::InvalidArgument(
            "sampling ratio must not be 0:0".into(),
        ));
    }
    let mut order: Vec<(f64, usize)> = blocks
        .iter()
        .enumerate()
        .map(|(i, b)| (block_entropy(b, spec, bins), i))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    // blocks strictly above the (lower) median entropy form the high side
    let median = order[(order.len() - 1) / 2].0;
    let mut high: Vec<usize> = order.iter().filter(|o| o.0 > median).map(|o| o.1).collect();
    let mut low: Vec<usize> = order
        .iter()
        .filter(|o| o.0 <= median)
        .map(|o| o.1)
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    high.sort_unstable();
    low.sort_unstable();
    high.shuffle(&mut rng);
    low.shuffle(&mut rng);

    let want_high = ((n * ratio.0) as f64 / (ratio.0 + ratio.1) as f64).round() as usize;
    let want_low = n - want_high;
    let mut take_high = want_high.min(high.len());
    let mut take_low = want_low.min(low.len());
    let mut backfilled = 0;
    if take_high < want_high {
        let extra = (want_high - take_high).min(low.len() - take_low);
        take_low += extra;
        backfilled += extra;
        warn!(
            "only {} high-entropy blocks available, back-filled {extra} from the low side",
            high.len()
        );
    }
    if take_low < want_low {
        let extra = (want_low - take_low).min(high.len() - take_high);
        take_high += extra;
        backfilled += extra;
        warn!(
            "only {} low-entropy blocks available, back-filled {extra} from the high side",
            low.len()
        );
    }
    let picked: Vec<DataBlock> = high[..take_high]
        .iter()
        .chain(&low[..take_low])
        .map(|&i| blocks[i].clone())
        .collect();
    Ok((
        picked,
        SamplingReport {
            high: take_high,
            low: take_low,
            backfilled,
        },
    ))
}
