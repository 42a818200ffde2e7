//! Embedding sets, ground-truth labels and the labeled/unlabeled split.

pub(crate) mod io;
mod synthetic;

use std::collections::{BTreeMap, HashSet};

pub use io::{
    load_embeddings, load_labels, load_split, save_embeddings, save_labels, save_split,
    LoadedLabels, EMBEDDING_MAGIC, EMBEDDING_VERSION,
};
pub use synthetic::{
    generate_synthetic, random_rotation, SampleCount, SyntheticConfig, SyntheticDataset,
};

use crate::{CdpError, Result};

/// Dense row-major embeddings for one model, keyed by sorted sample ids.
///
/// Rows are stored as written (not normalized); cosine similarity normalizes on
/// the fly.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    ids: Vec<u64>,
    vectors: Vec<f32>,
    dim: usize,
}

impl EmbeddingSet {
    pub fn new(ids: Vec<u64>, vectors: Vec<f32>, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(CdpError::Validation("embedding dim must be positive".into()));
        }
        if vectors.len() != ids.len() * dim {
            return Err(CdpError::DimensionMismatch {
                expected: ids.len() * dim,
                actual: vectors.len(),
            });
        }
        check_sorted_unique(&ids)?;
        for (row, id) in vectors.chunks_exact(dim).zip(&ids) {
            if row.iter().any(|x| !x.is_finite()) {
                return Err(CdpError::Validation(format!(
                    "non-finite embedding value for sample {id}"
                )));
            }
            if row.iter().all(|&x| x == 0.0) {
                return Err(CdpError::ZeroNorm(*id));
            }
        }
        Ok(Self { ids, vectors, dim })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn vectors(&self) -> &[f32] {
        &self.vectors
    }

    pub fn row(&self, index: usize) -> &[f32] {
        &self.vectors[index * self.dim..(index + 1) * self.dim]
    }

    pub fn index_of(&self, id: u64) -> Option<usize> {
        self.ids.binary_search(&id).ok()
    }

    pub fn row_by_id(&self, id: u64) -> Result<&[f32]> {
        self.index_of(id)
            .map(|i| self.row(i))
            .ok_or(CdpError::UnknownId(id))
    }

    /// Restricts the set to `ids` (which must be sorted and present).
    pub fn subset(&self, ids: &[u64]) -> Result<EmbeddingSet> {
        check_sorted_unique(ids)?;
        let mut vectors = Vec::with_capacity(ids.len() * self.dim);
        for &id in ids {
            vectors.extend_from_slice(self.row_by_id(id)?);
        }
        Ok(EmbeddingSet {
            ids: ids.to_vec(),
            vectors,
            dim: self.dim,
        })
    }
}

/// Checks that every set in a run covers the same ids in the same order.
pub fn check_aligned(sets: &[EmbeddingSet]) -> Result<()> {
    if let Some((first, rest)) = sets.split_first() {
        for (i, set) in rest.iter().enumerate() {
            if set.ids != first.ids {
                return Err(CdpError::Validation(format!(
                    "embedding set {} does not share the base set's ids",
                    i + 1
                )));
            }
        }
    }
    Ok(())
}

fn check_sorted_unique(ids: &[u64]) -> Result<()> {
    for w in ids.windows(2) {
        if w[0] >= w[1] {
            return Err(CdpError::Validation(format!(
                "ids must be unique and ascending (found {} before {})",
                w[0], w[1]
            )));
        }
    }
    Ok(())
}

/// Identity index per sample.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroundTruth {
    ids: Vec<u64>,
    labels: Vec<u32>,
}

impl GroundTruth {
    /// Builds a ground truth from unordered `(id, label)` pairs.
    ///
    /// Labels are remapped order-preservingly onto `0..num_identities`; the
    /// returned flag is true when that changed anything.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (u64, u32)>) -> Result<(Self, bool)> {
        let mut map = BTreeMap::new();
        for (id, label) in pairs {
            if map.insert(id, label).is_some() {
                return Err(CdpError::Validation(format!("duplicate id {id} in labels")));
            }
        }
        let distinct: std::collections::BTreeSet<u32> = map.values().copied().collect();
        let remap: BTreeMap<u32, u32> = distinct
            .iter()
            .enumerate()
            .map(|(i, &l)| (l, i as u32))
            .collect();
        let remapped = remap.iter().any(|(k, v)| k != v);
        let ids = map.keys().copied().collect();
        let labels = map.values().map(|l| remap[l]).collect();
        Ok((Self { ids, labels }, remapped))
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn num_identities(&self) -> usize {
        self.labels.iter().max().map_or(0, |&m| m as usize + 1)
    }

    pub fn label_of(&self, id: u64) -> Result<u32> {
        self.ids
            .binary_search(&id)
            .map(|i| self.labels[i])
            .map_err(|_| CdpError::UnknownId(id))
    }

    /// Restricts to `ids` and re-packs labels to a contiguous range.
    pub fn subset(&self, ids: &[u64]) -> Result<GroundTruth> {
        let pairs = ids
            .iter()
            .map(|&id| self.label_of(id).map(|l| (id, l)))
            .collect::<Result<Vec<_>>>()?;
        Ok(GroundTruth::from_pairs(pairs)?.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Partition {
    Labeled,
    Unlabeled,
}

impl Partition {
    pub fn as_str(self) -> &'static str {
        match self {
            Partition::Labeled => "labeled",
            Partition::Unlabeled => "unlabeled",
        }
    }
}

impl std::str::FromStr for Partition {
    type Err = CdpError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "labeled" => Ok(Partition::Labeled),
            "unlabeled" => Ok(Partition::Unlabeled),
            other => Err(CdpError::format("split", format!("unknown partition {other:?}"))),
        }
    }
}

/// Labeled/unlabeled partition of the sample ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    ids: Vec<u64>,
    partitions: Vec<Partition>,
}

impl Split {
    pub fn new(mut entries: Vec<(u64, Partition)>) -> Result<Self> {
        entries.sort_by_key(|e| e.0);
        let ids: Vec<u64> = entries.iter().map(|e| e.0).collect();
        check_sorted_unique(&ids)?;
        Ok(Self {
            ids,
            partitions: entries.into_iter().map(|e| e.1).collect(),
        })
    }

    pub fn entries(&self) -> impl Iterator<Item = (u64, Partition)> + '_ {
        self.ids.iter().copied().zip(self.partitions.iter().copied())
    }

    pub fn ids_in(&self, partition: Partition) -> Vec<u64> {
        self.entries()
            .filter(|e| e.1 == partition)
            .map(|e| e.0)
            .collect()
    }

    pub fn labeled_ids(&self) -> Vec<u64> {
        self.ids_in(Partition::Labeled)
    }

    pub fn unlabeled_ids(&self) -> Vec<u64> {
        self.ids_in(Partition::Unlabeled)
    }

    /// True when no identity has samples on both sides.
    pub fn is_identity_disjoint(&self, truth: &GroundTruth) -> Result<bool> {
        let mut labeled = HashSet::new();
        for id in self.labeled_ids() {
            labeled.insert(truth.label_of(id)?);
        }
        for id in self.unlabeled_ids() {
            if labeled.contains(&truth.label_of(id)?) {
                return Ok(false);
            }
        }
        Ok(true)
    }
}
