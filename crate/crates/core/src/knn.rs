//! Brute-force cosine k-NN graphs and candidate pair extraction.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::dataset::io::{csv_error, csv_reader, parse_field};
use crate::dataset::EmbeddingSet;
use crate::{CdpError, Result};

/// Neighbor count used throughout when none is configured.
pub const DEFAULT_K: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub id: u64,
    pub similarity: f64,
}

/// Per-node neighbor lists, each sorted by descending similarity with ties
/// broken by the smaller neighbor id.
#[derive(Clone, Debug, PartialEq)]
pub struct KnnGraph {
    k: usize,
    node_ids: Vec<u64>,
    neighbors: Vec<Vec<Neighbor>>,
}

impl KnnGraph {
    /// Effective neighbor count, `min(k, n - 1)`.
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn node_ids(&self) -> &[u64] {
        &self.node_ids
    }

    pub fn len(&self) -> usize {
        self.node_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node_ids.is_empty()
    }

    pub fn index_of(&self, id: u64) -> Option<usize> {
        self.node_ids.binary_search(&id).ok()
    }

    pub fn neighbors_at(&self, index: usize) -> &[Neighbor] {
        &self.neighbors[index]
    }

    pub fn neighbors(&self, id: u64) -> Result<&[Neighbor]> {
        self.index_of(id)
            .map(|i| self.neighbors_at(i))
            .ok_or(CdpError::UnknownId(id))
    }

    /// Directed membership: `b` is among `a`'s stored neighbors.
    /// The same graph restricted to each node's first `k` neighbors; equals
    /// a fresh build with `k` because neighbor order is total.
    pub fn truncated(&self, k: usize) -> Result<KnnGraph> {
        if k == 0 {
            return Err(CdpError::config("k", "must be at least 1"));
        }
        let k_eff = k.min(self.node_ids.len().saturating_sub(1));
        if k_eff > self.k {
            return Err(CdpError::Validation(format!(
                "cannot widen a k={} graph to k={k_eff}",
                self.k
            )));
        }
        Ok(KnnGraph {
            k: k_eff,
            node_ids: self.node_ids.clone(),
            neighbors: self.neighbors.iter().map(|l| l[..k_eff].to_vec()).collect(),
        })
    }

    pub fn has_directed_edge(&self, a: u64, b: u64) -> Result<bool> {
        Ok(self.neighbors(a)?.iter().any(|n| n.id == b))
    }

    /// Membership in the symmetrized graph (union of both directions).
    pub fn has_edge(&self, a: u64, b: u64) -> Result<bool> {
        Ok(self.has_directed_edge(a, b)? || self.has_directed_edge(b, a)?)
    }

    /// Debug dump as CSV `node,rank,neighbor,similarity` (rank is 0-based).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("node,rank,neighbor,similarity\n");
        for (node, list) in self.node_ids.iter().zip(&self.neighbors) {
            for (rank, n) in list.iter().enumerate() {
                let _ = writeln!(out, "{node},{rank},{},{}", n.id, n.similarity);
            }
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn load_csv(path: &Path) -> Result<KnnGraph> {
        let mut reader = csv_reader(path, &["node", "rank", "neighbor", "similarity"])?;
        let mut node_ids: Vec<u64> = Vec::new();
        let mut neighbors: Vec<Vec<Neighbor>> = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| csv_error(path, e))?;
            let node: u64 = parse_field(path, &record[0], "node")?;
            let rank: usize = parse_field(path, &record[1], "rank")?;
            let id: u64 = parse_field(path, &record[2], "neighbor")?;
            let similarity: f64 = parse_field(path, &record[3], "similarity")?;
            if node_ids.last() != Some(&node) {
                if node_ids.last().is_some_and(|&last| last >= node) {
                    return Err(CdpError::format(
                        path.display().to_string(),
                        "nodes must appear in ascending order",
                    ));
                }
                node_ids.push(node);
                neighbors.push(Vec::new());
            }
            let list = neighbors.last_mut().unwrap();
            if rank != list.len() {
                return Err(CdpError::format(
                    path.display().to_string(),
                    format!("node {node}: rank {rank} out of sequence"),
                ));
            }
            list.push(Neighbor { id, similarity });
        }
        let k = neighbors.iter().map(Vec::len).max().unwrap_or(0);
        let graph = KnnGraph {
            k,
            node_ids,
            neighbors,
        };
        graph.validate()?;
        Ok(graph)
    }

    /// Checks the structural invariants: no self edges, known neighbor ids,
    /// non-increasing similarities in `[-1, 1]`.
    pub fn validate(&self) -> Result<()> {
        for (node, list) in self.node_ids.iter().zip(&self.neighbors) {
            for n in list {
                if n.id == *node {
                    return Err(CdpError::Validation(format!("self edge at {node}")));
                }
                if self.index_of(n.id).is_none() {
                    return Err(CdpError::UnknownId(n.id));
                }
                if !(-1.0 - 1e-6..=1.0 + 1e-6).contains(&n.similarity) {
                    return Err(CdpError::Validation(format!(
                        "similarity {} out of range at {node}",
                        n.similarity
                    )));
                }
            }
            if list.windows(2).any(|w| w[0].similarity < w[1].similarity) {
                return Err(CdpError::Validation(format!(
                    "neighbors of {node} not sorted by similarity"
                )));
            }
        }
        Ok(())
    }
}

/// Cosine similarity accumulated in `f64`, clamped to `[-1, 1]`.
pub fn cosine_similarity<T: Copy + Into<f64>>(u: &[T], v: &[T]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(CdpError::DimensionMismatch {
            expected: u.len(),
            actual: v.len(),
        });
    }
    let nu = norm(u);
    let nv = norm(v);
    if nu == 0.0 || nv == 0.0 {
        return Err(CdpError::ZeroVector);
    }
    Ok(cosine_with_norms(u, v, nu, nv))
}

pub(crate) fn norm<T: Copy + Into<f64>>(u: &[T]) -> f64 {
    dot(u, u).sqrt()
}

/// Dot product in `f64` with four interleaved partial sums (fixed order, so
/// results are reproducible while still vectorizing).
#[inline]
pub(crate) fn dot<T: Copy + Into<f64>>(u: &[T], v: &[T]) -> f64 {
    let mut acc = [0.0f64; 4];
    let (uc, vc) = (u.chunks_exact(4), v.chunks_exact(4));
    let (ur, vr) = (uc.remainder(), vc.remainder());
    for (a, b) in uc.zip(vc) {
        for l in 0..4 {
            acc[l] += a[l].into() * b[l].into();
        }
    }
    let mut tail = 0.0;
    for (&a, &b) in ur.iter().zip(vr) {
        tail += a.into() * b.into();
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
pub(crate) fn cosine_with_norms<T: Copy + Into<f64>>(u: &[T], v: &[T], nu: f64, nv: f64) -> f64 {
    (dot(u, v) / (nu * nv)).clamp(-1.0, 1.0)
}

/// Orders by descending similarity, then ascending id.
#[inline]
fn rank_order(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    b.0.partial_cmp(&a.0)
        .unwrap_or(Ordering::Equal)
        .then(a.1.cmp(&b.1))
}

/// Exact top-`k` cosine neighbors of every sample.
///
/// Query rows are processed in parallel on the current rayon pool; each row is
/// independent, so the result does not depend on the worker count.
pub fn build_knn_graph(set: &EmbeddingSet, k: usize) -> Result<KnnGraph> {
    if k == 0 {
        return Err(CdpError::config("k", "must be at least 1"));
    }
    let n = set.len();
    if n < 2 {
        return Err(CdpError::Validation(
            "k-NN graph needs at least two samples".into(),
        ));
    }
    let k_eff = k.min(n - 1);
    let dim = set.dim();
    let mut unit: Vec<f64> = set.vectors().iter().map(|&x| f64::from(x)).collect();
    for row in unit.chunks_exact_mut(dim) {
        let nr = norm(row);
        row.iter_mut().for_each(|x| *x /= nr);
    }
    let row = |i: usize| &unit[i * dim..(i + 1) * dim];
    let ids = set.ids();
    let neighbors = (0..n)
        .into_par_iter()
        .map(|i| {
            let query = row(i);
            // bounded insertion keeps the k best under `rank_order`, which is
            // a total order, so this equals a full sort truncated to k
            let mut scored: Vec<(f64, usize)> = Vec::with_capacity(k_eff + 1);
            for j in (0..n).filter(|&j| j != i) {
                let cand = (dot(query, row(j)).clamp(-1.0, 1.0), j);
                if scored.len() == k_eff
                    && rank_order(&cand, scored.last().expect("k >= 1")) != Ordering::Less
                {
                    continue;
                }
                let pos = scored.partition_point(|x| rank_order(x, &cand) == Ordering::Less);
                scored.insert(pos, cand);
                scored.truncate(k_eff);
            }
            scored
                .into_iter()
                .map(|(similarity, j)| Neighbor {
                    id: ids[j],
                    similarity,
                })
                .collect()
        })
        .collect();
    Ok(KnnGraph {
        k: k_eff,
        node_ids: ids.to_vec(),
        neighbors,
    })
}

/// An unordered sample pair stored with `a < b`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
pub struct CandidatePair {
    pub a: u64,
    pub b: u64,
}

impl CandidatePair {
    pub fn new(x: u64, y: u64) -> Result<Self> {
        match x.cmp(&y) {
            Ordering::Less => Ok(Self { a: x, b: y }),
            Ordering::Greater => Ok(Self { a: y, b: x }),
            Ordering::Equal => Err(CdpError::Validation(format!("self pair ({x}, {x})"))),
        }
    }
}

/// Deduplicated undirected edges of `graph`, sorted by `(a, b)`.
pub fn candidate_pairs(graph: &KnnGraph) -> Vec<CandidatePair> {
    let mut pairs: Vec<CandidatePair> = graph
        .node_ids
        .iter()
        .zip(&graph.neighbors)
        .flat_map(|(&node, list)| {
            list.iter()
                .map(move |n| CandidatePair::new(node, n.id).expect("no self edges"))
        })
        .collect();
    pairs.sort_unstable();
    pairs.dedup();
    pairs
}
