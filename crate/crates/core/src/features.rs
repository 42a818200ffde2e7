//! Committee consensus features for candidate pairs.
//!
//! For `N` committee members plus the base model (model 0) the mediator input
//! of one pair `(a, b)` is the concatenation
//!
//! ```text
//! [ relationship (N) | affinity (N+1) | mean (2(N+1)) | variance (2(N+1)) ]
//! ```
//!
//! where `relationship[i]` says whether committee member `i` links the pair in
//! its symmetrized k-NN graph, `affinity[m]` is the pair's cosine similarity
//! under model `m`, and the mean/variance blocks hold node `a`'s statistics for
//! models `0..=N` followed by node `b`'s. Total length is `6N + 5`.

use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::dataset::EmbeddingSet;
use crate::knn::{cosine_with_norms, norm, CandidatePair, KnnGraph};
use crate::{CdpError, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"CDPF";
pub const FEATURE_VERSION: u32 = 1;

/// Mediator input length for a committee of `n` members.
pub const fn mediator_input_len(n: usize) -> usize {
    6 * n + 5
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NodeNeighborStats {
    pub mean: f64,
    /// Population variance (divides by the neighbor count).
    pub var: f64,
}

pub fn neighbor_stats(node: u64, graph: &KnnGraph) -> Result<NodeNeighborStats> {
    Ok(stats_of(graph.neighbors(node)?.iter().map(|n| n.similarity)))
}

fn stats_of(sims: impl Iterator<Item = f64> + Clone) -> NodeNeighborStats {
    let count = sims.clone().count();
    if count == 0 {
        return NodeNeighborStats { mean: 0.0, var: 0.0 };
    }
    let mean = sims.clone().sum::<f64>() / count as f64;
    let var = sims.map(|s| (s - mean) * (s - mean)).sum::<f64>() / count as f64;
    NodeNeighborStats { mean, var }
}

pub fn relationship_vector(pair: CandidatePair, committee: &[KnnGraph]) -> Result<Vec<f64>> {
    committee
        .iter()
        .map(|g| g.has_edge(pair.a, pair.b).map(|e| if e { 1.0 } else { 0.0 }))
        .collect()
}

pub fn affinity_vector(pair: CandidatePair, sets: &[EmbeddingSet]) -> Result<Vec<f64>> {
    sets.iter()
        .map(|set| {
            let u = set.row_by_id(pair.a)?;
            let v = set.row_by_id(pair.b)?;
            let (nu, nv) = (norm(u), norm(v));
            if nu == 0.0 {
                return Err(CdpError::ZeroNorm(pair.a));
            }
            if nv == 0.0 {
                return Err(CdpError::ZeroNorm(pair.b));
            }
            Ok(cosine_with_norms(u, v, nu, nv))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairFeatureVector {
    pub relationship: Vec<f64>,
    pub affinity: Vec<f64>,
    pub dist_mean: Vec<f64>,
    pub dist_var: Vec<f64>,
}

impl PairFeatureVector {
    pub fn len(&self) -> usize {
        self.relationship.len() + self.affinity.len() + self.dist_mean.len() + self.dist_var.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        out.extend_from_slice(&self.relationship);
        out.extend_from_slice(&self.affinity);
        out.extend_from_slice(&self.dist_mean);
        out.extend_from_slice(&self.dist_var);
        out
    }
}

/// `graphs` and `sets` hold the base model first, then the committee.
pub fn assemble_mediator_input(
    pair: CandidatePair,
    graphs: &[KnnGraph],
    sets: &[EmbeddingSet],
) -> Result<PairFeatureVector> {
    check_models(graphs, sets)?;
    let relationship = relationship_vector(pair, &graphs[1..])?;
    let affinity = affinity_vector(pair, sets)?;
    let mut dist_mean = Vec::with_capacity(2 * graphs.len());
    let mut dist_var = Vec::with_capacity(2 * graphs.len());
    for node in [pair.a, pair.b] {
        for g in graphs {
            let s = neighbor_stats(node, g)?;
            dist_mean.push(s.mean);
            dist_var.push(s.var);
        }
    }
    Ok(PairFeatureVector {
        relationship,
        affinity,
        dist_mean,
        dist_var,
    })
}

fn check_models(graphs: &[KnnGraph], sets: &[EmbeddingSet]) -> Result<()> {
    if graphs.is_empty() || graphs.len() != sets.len() {
        return Err(CdpError::Validation(format!(
            "need matching base+committee graphs and sets, got {} graphs and {} sets",
            graphs.len(),
            sets.len()
        )));
    }
    for (g, s) in graphs.iter().zip(sets) {
        if g.node_ids() != s.ids() {
            return Err(CdpError::Validation(
                "graph and embedding set cover different ids".into(),
            ));
        }
    }
    if graphs.iter().any(|g| g.node_ids() != graphs[0].node_ids()) {
        return Err(CdpError::Validation("models cover different ids".into()));
    }
    Ok(())
}

/// Which feature blocks the mediator sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum FeatureSubset {
    /// Relationship only.
    #[serde(rename = "R")]
    Relationship,
    /// Relationship and affinity.
    #[serde(rename = "R+A")]
    RelationshipAffinity,
    /// All four blocks.
    #[serde(rename = "R+A+D")]
    Full,
}

impl FeatureSubset {
    pub fn dim(self, n: usize) -> usize {
        match self {
            FeatureSubset::Relationship => n,
            FeatureSubset::RelationshipAffinity => 2 * n + 1,
            FeatureSubset::Full => mediator_input_len(n),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            FeatureSubset::Relationship => "R",
            FeatureSubset::RelationshipAffinity => "R+A",
            FeatureSubset::Full => "R+A+D",
        }
    }

    /// The blocks are laid out so that every subset is a prefix.
    pub fn project(self, full: &FeatureMatrix, n: usize) -> Result<FeatureMatrix> {
        if full.dim != mediator_input_len(n) {
            return Err(CdpError::DimensionMismatch {
                expected: mediator_input_len(n),
                actual: full.dim,
            });
        }
        let dim = self.dim(n);
        let values = full
            .values
            .chunks_exact(full.dim)
            .flat_map(|row| row[..dim].iter().copied())
            .collect();
        Ok(FeatureMatrix {
            pairs: full.pairs.clone(),
            dim,
            values,
        })
    }
}

/// One feature row (stored as `f32`) per candidate pair.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub pairs: Vec<CandidatePair>,
    pub dim: usize,
    pub values: Vec<f32>,
}

impl FeatureMatrix {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.values.chunks_exact(self.dim.max(1))
    }

    /// Binary dump: `"CDPF" | u32 version | u64 pairs | u32 dim`, then the
    /// `(u64 a, u64 b)` pair index, then the `f32` rows (all little-endian).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(20 + self.len() * (16 + 4 * self.dim));
        buf.extend_from_slice(FEATURE_MAGIC);
        buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.len() as u64).to_le_bytes());
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for p in &self.pairs {
            buf.extend_from_slice(&p.a.to_le_bytes());
            buf.extend_from_slice(&p.b.to_le_bytes());
        }
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<FeatureMatrix> {
        let ctx = path.display().to_string();
        let bytes = fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => CdpError::MissingInput(path.to_path_buf()),
            _ => CdpError::Io(e),
        })?;
        if bytes.len() < 20 || &bytes[..4] != FEATURE_MAGIC {
            return Err(CdpError::format(ctx, "bad magic or header, expected CDPF"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FEATURE_VERSION {
            return Err(CdpError::format(ctx, format!("unsupported version {version}")));
        }
        let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
        let expected = 20 + n * (16 + 4 * dim);
        if bytes.len() != expected {
            return Err(CdpError::Truncated {
                expected,
                actual: bytes.len(),
            });
        }
        let (pair_bytes, value_bytes) = bytes[20..].split_at(16 * n);
        let pairs = pair_bytes
            .chunks_exact(16)
            .map(|c| {
                let a = u64::from_le_bytes(c[..8].try_into().unwrap());
                let b = u64::from_le_bytes(c[8..].try_into().unwrap());
                CandidatePair::new(a, b)
            })
            .collect::<Result<Vec<_>>>()?;
        let values = value_bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(FeatureMatrix { pairs, dim, values })
    }
}

/// Full `6N+5` features for every pair, computed in parallel with cached
/// per-node statistics. Row order follows `pairs`.
pub fn compute_features(
    pairs: &[CandidatePair],
    graphs: &[KnnGraph],
    sets: &[EmbeddingSet],
) -> Result<FeatureMatrix> {
    check_models(graphs, sets)?;
    let n_models = graphs.len();
    let dim = mediator_input_len(n_models - 1);
    let stats: Vec<Vec<NodeNeighborStats>> = graphs
        .iter()
        .map(|g| {
            (0..g.len())
                .map(|i| stats_of(g.neighbors_at(i).iter().map(|n| n.similarity)))
                .collect()
        })
        .collect();
    let norms: Vec<Vec<f64>> = sets
        .iter()
        .map(|s| (0..s.len()).map(|i| norm(s.row(i))).collect())
        .collect();
    let ids = graphs[0].node_ids();
    let index = |id: u64| ids.binary_search(&id).map_err(|_| CdpError::UnknownId(id));

    let rows = pairs
        .par_iter()
        .map(|&pair| {
            let (ia, ib) = (index(pair.a)?, index(pair.b)?);
            let mut row = Vec::with_capacity(dim);
            for g in &graphs[1..] {
                let linked = g.neighbors_at(ia).iter().any(|x| x.id == pair.b)
                    || g.neighbors_at(ib).iter().any(|x| x.id == pair.a);
                row.push(if linked { 1.0 } else { 0.0 });
            }
            for (m, set) in sets.iter().enumerate() {
                row.push(cosine_with_norms(set.row(ia), set.row(ib), norms[m][ia], norms[m][ib]));
            }
            for node in [ia, ib] {
                row.extend(stats.iter().map(|s| s[node].mean));
            }
            for node in [ia, ib] {
                row.extend(stats.iter().map(|s| s[node].var));
            }
            Ok(row.into_iter().map(|v| v as f32).collect::<Vec<f32>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FeatureMatrix {
        pairs: pairs.to_vec(),
        dim,
        values: rows.concat(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, SampleCount, SyntheticConfig};
    use crate::knn::{build_knn_graph, candidate_pairs};
    use proptest::prelude::*;

    fn toy(n_committee: usize, angle: f64, noise: f64, seed: u64) -> (Vec<EmbeddingSet>, Vec<KnnGraph>) {
        let cfg = SyntheticConfig {
            num_identities: 6,
            labeled_identities: Some(1),
            samples_per_identity: SampleCount::Fixed(5),
            dim: 6,
            intra_class_sigma: 0.3,
            num_committee: n_committee,
            view_rotation_angle: angle,
            view_noise_sigma: noise,
            seed,
            ..Default::default()
        };
        let data = generate_synthetic(&cfg).unwrap();
        let mut sets = vec![data.base];
        sets.extend(data.committee);
        let graphs = sets.iter().map(|s| build_knn_graph(s, 4).unwrap()).collect();
        (sets, graphs)
    }

    #[test]
    fn stats_examples() {
        assert_eq!(stats_of([0.5, 0.5, 0.5].into_iter()), NodeNeighborStats { mean: 0.5, var: 0.0 });
        assert_eq!(stats_of([0.0, 1.0].into_iter()), NodeNeighborStats { mean: 0.5, var: 0.25 });
    }

    #[test]
    fn length_law_small_committees() {
        for n in [0usize, 1, 3] {
            let (sets, graphs) = toy(n, 0.4, 0.1, 1);
            let pair = candidate_pairs(&graphs[0])[0];
            let f = assemble_mediator_input(pair, &graphs, &sets).unwrap();
            assert_eq!(f.len(), 6 * n + 5);
            assert_eq!(f.relationship.len(), n);
        }
        assert_eq!(mediator_input_len(8), 53);
    }

    #[test]
    fn homogeneous_views_give_all_ones_and_equal_affinity() {
        let (sets, graphs) = toy(3, 0.0, 0.0, 2);
        for pair in candidate_pairs(&graphs[0]) {
            let f = assemble_mediator_input(pair, &graphs, &sets).unwrap();
            assert_eq!(f.relationship, vec![1.0; 3]);
            assert!(f.affinity.iter().all(|&a| a == f.affinity[0]));
        }
    }

    #[test]
    fn identical_points_have_unit_affinity() {
        let set = EmbeddingSet::new(vec![0, 1, 2], vec![1.0, 2.0, 1.0, 2.0, -1.0, 0.5], 2).unwrap();
        let pair = CandidatePair::new(0, 1).unwrap();
        for a in affinity_vector(pair, &[set.clone(), set]).unwrap() {
            assert!((a - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn absent_pair_has_zero_relationship() {
        let (_, graphs) = toy(3, 0.4, 0.2, 3);
        // find a pair linked in no committee graph
        let ids = graphs[0].node_ids().to_vec();
        let mut found = false;
        'outer: for (i, &a) in ids.iter().enumerate() {
            for &b in &ids[i + 1..] {
                if graphs[1..].iter().all(|g| !g.has_edge(a, b).unwrap()) {
                    let r = relationship_vector(CandidatePair::new(a, b).unwrap(), &graphs[1..]).unwrap();
                    assert_eq!(r, vec![0.0; 3]);
                    found = true;
                    break 'outer;
                }
            }
        }
        assert!(found);
    }

    #[test]
    fn unknown_id_is_rejected() {
        let (sets, graphs) = toy(1, 0.4, 0.1, 4);
        let pair = CandidatePair::new(0, 9999).unwrap();
        assert!(matches!(
            assemble_mediator_input(pair, &graphs, &sets),
            Err(CdpError::UnknownId(9999))
        ));
    }

    #[test]
    fn batch_matches_single_pair_assembly() {
        let (sets, graphs) = toy(3, 0.6, 0.15, 5);
        let pairs = candidate_pairs(&graphs[0]);
        let m = compute_features(&pairs, &graphs, &sets).unwrap();
        for (i, &p) in pairs.iter().enumerate() {
            let single: Vec<f32> = assemble_mediator_input(p, &graphs, &sets)
                .unwrap()
                .to_vec()
                .into_iter()
                .map(|v| v as f32)
                .collect();
            assert_eq!(m.row(i), single.as_slice());
        }
    }

    #[test]
    fn subsets_are_prefixes() {
        let (sets, graphs) = toy(2, 0.6, 0.15, 6);
        let pairs = candidate_pairs(&graphs[0]);
        let m = compute_features(&pairs, &graphs, &sets).unwrap();
        let r = FeatureSubset::Relationship.project(&m, 2).unwrap();
        assert_eq!(r.dim, 2);
        let ra = FeatureSubset::RelationshipAffinity.project(&m, 2).unwrap();
        assert_eq!(ra.dim, 5);
        assert_eq!(ra.row(3), &m.row(3)[..5]);
    }

    #[test]
    fn feature_dump_round_trip() {
        let (sets, graphs) = toy(2, 0.6, 0.15, 7);
        let m = compute_features(&candidate_pairs(&graphs[0]), &graphs, &sets).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.cdpf");
        m.save(&path).unwrap();
        assert_eq!(FeatureMatrix::load(&path).unwrap(), m);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn swap_symmetry(seed in any::<u64>(), n in 0usize..4) {
            let (sets, graphs) = toy(n, 0.7, 0.2, seed);
            let nm = n + 1;
            for pair in candidate_pairs(&graphs[0]).into_iter().take(10) {
                let f = assemble_mediator_input(pair, &graphs, &sets).unwrap();
                // same pair with endpoints swapped, assembled by hand
                let mut mean_swapped = f.dist_mean[nm..].to_vec();
                mean_swapped.extend_from_slice(&f.dist_mean[..nm]);
                let swapped_mean: Vec<f64> = [pair.b, pair.a]
                    .iter()
                    .flat_map(|&node| graphs.iter().map(move |g| neighbor_stats(node, g).unwrap().mean))
                    .collect();
                prop_assert_eq!(mean_swapped, swapped_mean);
                let rel_swapped: Vec<f64> = graphs[1..]
                    .iter()
                    .map(|g| if g.has_edge(pair.b, pair.a).unwrap() { 1.0 } else { 0.0 })
                    .collect();
                prop_assert_eq!(&f.relationship, &rel_swapped);
                for (m, set) in sets.iter().enumerate() {
                    let rev = crate::knn::cosine_similarity(
                        set.row_by_id(pair.b).unwrap(),
                        set.row_by_id(pair.a).unwrap(),
                    ).unwrap();
                    prop_assert_eq!(f.affinity[m], rev);
                }
            }
        }
    }
}
