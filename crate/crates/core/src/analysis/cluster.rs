use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::LatentTable;

const KMEANS_RESTARTS: usize = 10;
const KMEANS_ITERS: usize = 300;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Spectral clustering of `points` into `k` groups.
///
/// Affinities are Gaussian in Euclidean distance with the bandwidth set to
/// the median pairwise distance (the median of the nonzero distances when
/// more than half the pairs coincide). The `k` leading eigenvectors of the
/// symmetrically normalized affinity are row-normalized and grouped with
/// seeded k-means++. Labels are numbered by first appearance.
pub fn spectral_cluster(points: &[&[f64]], k: usize, seed: u64) -> Result<Vec<usize>> {
    let n = points.len();
    if k < 2 {
        return Err(Error::InvalidArgument(format!(
            "k must be at least 2, got {k}"
        )));
    }
    if k > n {
        return Err(Error::InvalidArgument(format!(
            "k = {k} exceeds the {n} members"
        )));
    }
    let mut d2 = DMatrix::<f64>::zeros(n, n);
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let d = sq_dist(points[i], points[j]);
            d2[(i, j)] = d;
            d2[(j, i)] = d;
            dists.push(d.sqrt());
        }
    }
    let nonzero: Vec<f64> = dists.iter().copied().filter(|&d| d > 0.0).collect();
    if nonzero.is_empty() {
        return Err(Error::Analysis(
            "degenerate affinity: all latent vectors are identical".into(),
        ));
    }
    let mut sigma = median(dists);
    if sigma <= 0.0 {
        sigma = median(nonzero);
    }
    let two_s2 = 2.0 * sigma * sigma;
    let mut w = d2.map(|d| (-d / two_s2).exp());
    for i in 0..n {
        w[(i, i)] = 0.0;
    }
    let inv_sqrt_deg: Vec<f64> = (0..n)
        .map(|i| 1.0 / w.row(i).sum().max(1e-300).sqrt())
        .collect();
    for i in 0..n {
        for j in 0..n {
            w[(i, j)] *= inv_sqrt_deg[i] * inv_sqrt_deg[j];
        }
    }
    let eig = SymmetricEigen::new(w);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let mut emb: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            order[..k]
                .iter()
                .map(|&c| eig.eigenvectors[(i, c)])
                .collect()
        })
        .collect();
    for row in &mut emb {
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|x| *x /= norm);
        }
    }
    let labels = kmeans(&emb, k, seed);
    let distinct = {
        let mut l = labels.clone();
        l.sort_unstable();
        l.dedup();
        l.len()
    };
    if distinct < k {
        return Err(Error::Analysis(format!(
            "degenerate affinity: only {distinct} effective clusters for k = {k}"
        )));
    }
    Ok(relabel(&labels))
}

fn relabel(labels: &[usize]) -> Vec<usize> {
    let mut map: Vec<Option<usize>> = vec![None; labels.iter().max().map_or(0, |m| m + 1)];
    let mut next = 0;
    labels
        .iter()
        .map(|&l| {
            *map[l].get_or_insert_with(|| {
                next += 1;
                next - 1
            })
        })
        .collect()
}

/// Best of several seeded k-means++ runs by inertia.
fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, Vec<usize>)> = None;
    for _ in 0..KMEANS_RESTARTS {
        let (inertia, labels) = kmeans_once(points, k, &mut rng);
        if best.as_ref().is_none_or(|(b, _)| inertia < *b) {
            best = Some((inertia, labels));
        }
    }
    best.expect("at least one restart").1
}

fn kmeans_once(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> (f64, Vec<usize>) {
    let n = points.len();
    let mut centers = vec![points[rng.gen_range(0..n)].clone()];
    let mut closest: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = closest.iter().sum();
        let pick = if total > 0.0 {
            let mut t = rng.gen::<f64>() * total;
            let mut idx = n - 1;
            for (i, &c) in closest.iter().enumerate() {
                if t < c {
                    idx = i;
                    break;
                }
                t -= c;
            }
            idx
        } else {
            rng.gen_range(0..n)
        };
        centers.push(points[pick].clone());
        for (c, p) in closest.iter_mut().zip(points) {
            *c = c.min(sq_dist(p, &points[pick]));
        }
    }
    let mut labels = vec![0; n];
    for it in 0..KMEANS_ITERS {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let mut bi = 0;
            let mut bd = f64::INFINITY;
            for (c, center) in centers.iter().enumerate() {
                let d = sq_dist(p, center);
                if d < bd {
                    bd = d;
                    bi = c;
                }
            }
            if labels[i] != bi {
                labels[i] = bi;
                changed = true;
            }
        }
        if !changed && it > 0 {
            break;
        }
        let dim = points[0].len();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            sums[l].iter_mut().zip(p).for_each(|(s, x)| *s += x);
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    let inertia = points
        .iter()
        .zip(&labels)
        .map(|(p, &l)| sq_dist(p, &centers[l]))
        .sum();
    (inertia, labels)
}

pub type NodeId = u32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterNode {
    pub id: NodeId,
    pub parent: Option<NodeId>,
    /// Row positions in the latent table, ascending.
    pub members: Vec<usize>,
    pub children: Vec<NodeId>,
}

/// Hierarchy of clusters over the rows of a latent table. Node 0 is the
/// root and covers every row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterTree {
    /// Sorted by id.
    pub nodes: Vec<ClusterNode>,
}

impl ClusterTree {
    pub fn new(rows: usize) -> Result<Self> {
        if rows == 0 {
            return Err(Error::Analysis(
                "cannot build a tree over zero blocks".into(),
            ));
        }
        Ok(ClusterTree {
            nodes: vec![ClusterNode {
                id: 0,
                parent: None,
                members: (0..rows).collect(),
                children: Vec::new(),
            }],
        })
    }

    pub fn root(&self) -> &ClusterNode {
        &self.nodes[0]
    }

    fn pos(&self, id: NodeId) -> Result<usize> {
        self.nodes
            .binary_search_by_key(&id, |n| n.id)
            .map_err(|_| Error::UnknownNode(id))
    }

    pub fn node(&self, id: NodeId) -> Result<&ClusterNode> {
        Ok(&self.nodes[self.pos(id)?])
    }

    pub fn leaves(&self) -> impl Iterator<Item = &ClusterNode> {
        self.nodes.iter().filter(|n| n.children.is_empty())
    }

    /// Leaf id of every row.
    pub fn leaf_labels(&self) -> Vec<NodeId> {
        let mut out = vec![0; self.root().members.len()];
        for leaf in self.leaves() {
            for &m in &leaf.members {
                out[m] = leaf.id;
            }
        }
        out
    }

    /// Splits `id` into `k` children by spectral clustering of its members.
    /// A node that already has children is merged first.
    pub fn split_node(
        &mut self,
        table: &LatentTable,
        id: NodeId,
        k: usize,
        seed: u64,
    ) -> Result<Vec<NodeId>> {
        if table.len() != self.root().members.len() {
            return Err(Error::Analysis(
                "tree and latent table disagree on block count".into(),
            ));
        }
        let members = self.node(id)?.members.clone();
        let points: Vec<&[f64]> = members.iter().map(|&m| table.rows[m].as_slice()).collect();
        let labels = spectral_cluster(&points, k, seed)?;
        self.merge_node(id)?;
        let first = self.nodes.last().expect("root exists").id + 1;
        let ids: Vec<NodeId> = (0..k as NodeId).map(|c| first + c).collect();
        for (c, &cid) in ids.iter().enumerate() {
            self.nodes.push(ClusterNode {
                id: cid,
                parent: Some(id),
                members: members
                    .iter()
                    .zip(&labels)
                    .filter(|(_, &l)| l == c)
                    .map(|(&m, _)| m)
                    .collect(),
                children: Vec::new(),
            });
        }
        let p = self.pos(id)?;
        self.nodes[p].children = ids.clone();
        Ok(ids)
    }

    /// Removes every descendant of `id`, making it a leaf again.
    pub fn merge_node(&mut self, id: NodeId) -> Result<()> {
        let p = self.pos(id)?;
        let mut stack = std::mem::take(&mut self.nodes[p].children);
        let mut doomed = Vec::new();
        while let Some(c) = stack.pop() {
            stack.extend(self.node(c)?.children.iter().copied());
            doomed.push(c);
        }
        self.nodes.retain(|n| !doomed.contains(&n.id));
        Ok(())
    }

    /// Checks the partition structure of the hierarchy.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Analysis(format!("invalid cluster tree: {m}")));
        if self.nodes.is_empty() || self.nodes[0].id != 0 || self.nodes[0].parent.is_some() {
            return bad("missing root".into());
        }
        if self.nodes.windows(2).any(|w| w[0].id >= w[1].id) {
            return bad("ids not strictly increasing".into());
        }
        for n in &self.nodes {
            if n.members.is_empty() {
                return bad(format!("node {} is empty", n.id));
            }
            if n.children.is_empty() {
                continue;
            }
            let mut union = Vec::new();
            for &c in &n.children {
                let child = self.node(c)?;
                if child.parent != Some(n.id) {
                    return bad(format!("node {c} has the wrong parent"));
                }
                union.extend_from_slice(&child.members);
            }
            union.sort_unstable();
            if union != n.members {
                return bad(format!("children of {} do not partition it", n.id));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn blobs(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Normal::new(0.0, 1.0).unwrap();
        let mut pts = Vec::new();
        let mut truth = Vec::new();
        for i in 0..n {
            let c = (i % 2) as f64 * 10.0;
            pts.push((0..6).map(|_| c + g.sample(&mut rng)).collect());
            truth.push(i % 2);
        }
        (pts, truth)
    }

    #[test]
    fn recovers_separated_blobs() {
        let (pts, truth) = blobs(40, 1);
        let refs: Vec<&[f64]> = pts.iter().map(|p| p.as_slice()).collect();
        let labels = spectral_cluster(&refs, 2, 3).unwrap();
        assert_eq!(labels, truth);
        assert_eq!(labels, spectral_cluster(&refs, 2, 3).unwrap());
    }

    #[test]
    fn identical_rows_are_degenerate() {
        let pts = vec![vec![1.0, 2.0]; 5];
        let refs: Vec<&[f64]> = pts.iter().map(|p| p.as_slice()).collect();
        assert!(matches!(
            spectral_cluster(&refs, 2, 0),
            Err(Error::Analysis(_))
        ));
        assert!(spectral_cluster(&refs[..1], 2, 0).is_err());
        assert!(spectral_cluster(&refs, 1, 0).is_err());
    }

    #[test]
    fn split_then_merge_restores_tree() {
        let (pts, _) = blobs(20, 2);
        let table =
            LatentTable::new([0; 16], "", (0..20).map(|i| [i, 0, 0]).collect(), pts).unwrap();
        let mut tree = ClusterTree::new(20).unwrap();
        let original = tree.clone();
        let kids = tree.split_node(&table, 0, 2, 0).unwrap();
        tree.validate().unwrap();
        tree.split_node(&table, kids[0], 2, 0).unwrap();
        tree.validate().unwrap();
        assert_eq!(tree.leaves().count(), 3);
        let labels = tree.leaf_labels();
        assert!(labels
            .iter()
            .all(|l| tree.node(*l).unwrap().children.is_empty()));
        tree.merge_node(0).unwrap();
        assert_eq!(tree, original);
        assert!(matches!(
            tree.split_node(&table, 9, 2, 0),
            Err(Error::UnknownNode(9))
        ));
        assert!(tree.split_node(&table, 0, 21, 0).is_err());
    }
}
