//! Pseudo-label propagation over the consensus graph.
//!
//! Components larger than the size cap are split by repeatedly dropping their
//! weakest edges: with `s_min` the lowest score inside the component the
//! threshold is `s_min + (1 - s_min) * step` and only edges scoring strictly
//! above it survive. Surviving edges are re-decomposed and re-queued (FIFO);
//! components within the cap receive the next label. Nodes left without any
//! surviving edge are reported as unlabeled.

use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::EmbeddingSet;
use crate::mediator::SelectedEdge;
use crate::{CdpError, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Edge {
    pub a: u64,
    pub b: u64,
    pub score: f64,
}

/// Undirected weighted graph; edges are stored with `a < b`, sorted, unique.
#[derive(Clone, Debug, PartialEq)]
pub struct ConsensusGraph {
    nodes: Vec<u64>,
    edges: Vec<Edge>,
}

impl ConsensusGraph {
    pub fn new(mut nodes: Vec<u64>, mut edges: Vec<Edge>) -> Result<Self> {
        nodes.sort_unstable();
        if nodes.windows(2).any(|w| w[0] == w[1]) {
            return Err(CdpError::Validation("duplicate node in consensus graph".into()));
        }
        for e in &mut edges {
            if e.a == e.b {
                return Err(CdpError::Validation(format!("self loop at {}", e.a)));
            }
            if e.a > e.b {
                std::mem::swap(&mut e.a, &mut e.b);
            }
            if !(0.0..=1.0).contains(&e.score) {
                return Err(CdpError::Validation(format!(
                    "edge ({}, {}) score {} outside [0, 1]",
                    e.a, e.b, e.score
                )));
            }
            for id in [e.a, e.b] {
                if nodes.binary_search(&id).is_err() {
                    return Err(CdpError::UnknownId(id));
                }
            }
        }
        edges.sort_by_key(|e| (e.a, e.b));
        if edges.windows(2).any(|w| (w[0].a, w[0].b) == (w[1].a, w[1].b)) {
            return Err(CdpError::Validation("duplicate edge in consensus graph".into()));
        }
        Ok(Self { nodes, edges })
    }

    pub fn from_selected(nodes: Vec<u64>, selected: &[SelectedEdge]) -> Result<Self> {
        let edges = selected
            .iter()
            .map(|e| Edge {
                a: e.pair.a,
                b: e.pair.b,
                score: e.weight,
            })
            .collect();
        Self::new(nodes, edges)
    }

    pub fn nodes(&self) -> &[u64] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for e in &self.edges {
            let (i, j) = (self.index(e.a), self.index(e.b));
            adj[i].push(j);
            adj[j].push(i);
        }
        adj
    }

    fn index(&self, id: u64) -> usize {
        self.nodes.binary_search(&id).expect("validated endpoint")
    }
}

/// Maximal connected node sets, each sorted, ordered by smallest member.
pub fn connected_components(graph: &ConsensusGraph) -> Vec<Vec<u64>> {
    components_of(&graph.nodes, &graph.edges)
        .into_iter()
        .map(|(nodes, _)| nodes)
        .collect()
}

/// Breadth-first decomposition of `(nodes, edges)`; returns every component
/// with its own edges.
fn components_of(nodes: &[u64], edges: &[Edge]) -> Vec<(Vec<u64>, Vec<Edge>)> {
    let index = |id: u64| nodes.binary_search(&id).expect("edge endpoint in node set");
    let mut adj = vec![Vec::new(); nodes.len()];
    for (k, e) in edges.iter().enumerate() {
        let (i, j) = (index(e.a), index(e.b));
        adj[i].push((j, k));
        adj[j].push((i, k));
    }
    let mut comp = vec![usize::MAX; nodes.len()];
    let mut out: Vec<(Vec<u64>, Vec<Edge>)> = Vec::new();
    for start in 0..nodes.len() {
        if comp[start] != usize::MAX {
            continue;
        }
        let c = out.len();
        comp[start] = c;
        let mut members = vec![start];
        let mut queue = VecDeque::from([start]);
        while let Some(u) = queue.pop_front() {
            for &(v, _) in &adj[u] {
                if comp[v] == usize::MAX {
                    comp[v] = c;
                    members.push(v);
                    queue.push_back(v);
                }
            }
        }
        members.sort_unstable();
        out.push((members.into_iter().map(|i| nodes[i]).collect(), Vec::new()));
    }
    for e in edges {
        out[comp[index(e.a)]].1.push(*e);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PropagationConfig {
    /// Largest allowed cluster.
    pub max_size: usize,
    pub step: f64,
    /// Drop size-1 components instead of labeling them.
    pub discard_singletons: bool,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        Self {
            max_size: 300,
            step: 0.1,
            discard_singletons: false,
        }
    }
}

impl PropagationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0 && self.step < 1.0) {
            return Err(CdpError::config("step", "must lie in (0, 1)"));
        }
        if self.max_size == 0 {
            return Err(CdpError::config("max_size", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LabelAssignment {
    pub assignments: BTreeMap<u64, u32>,
    pub unlabeled_ids: Vec<u64>,
    pub num_labels: u32,
}

impl LabelAssignment {
    pub fn label_of(&self, id: u64) -> Option<u32> {
        self.assignments.get(&id).copied()
    }

    /// Members of every pseudo-label, in label order.
    pub fn clusters(&self) -> Vec<Vec<u64>> {
        let mut out = vec![Vec::new(); self.num_labels as usize];
        for (&id, &l) in &self.assignments {
            out[l as usize].push(id);
        }
        out
    }

    /// Assignment CSV `id,pseudo_label` (unlabeled nodes omitted).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,pseudo_label\n");
        for (id, l) in &self.assignments {
            let _ = writeln!(out, "{id},{l}");
        }
        out
    }

    /// Sidecar CSV listing unlabeled ids under the header `id`.
    pub fn unlabeled_csv(&self) -> String {
        let mut out = String::from("id\n");
        for id in &self.unlabeled_ids {
            let _ = writeln!(out, "{id}");
        }
        out
    }

    pub fn save(&self, assignments: &Path, unlabeled: &Path) -> Result<()> {
        std::fs::write(assignments, self.to_csv())?;
        std::fs::write(unlabeled, self.unlabeled_csv())?;
        Ok(())
    }

    pub fn load(assignments: &Path, unlabeled: &Path) -> Result<Self> {
        use crate::dataset::io::{csv_error, csv_reader, parse_field};
        let mut map = BTreeMap::new();
        let mut reader = csv_reader(assignments, &["id", "pseudo_label"])?;
        for record in reader.records() {
            let record = record.map_err(|e| csv_error(assignments, e))?;
            let id: u64 = parse_field(assignments, &record[0], "id")?;
            let label: u32 = parse_field(assignments, &record[1], "pseudo_label")?;
            if map.insert(id, label).is_some() {
                return Err(CdpError::Validation(format!("duplicate id {id} in assignment")));
            }
        }
        let mut reader = csv_reader(unlabeled, &["id"])?;
        let mut unlabeled_ids = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| csv_error(unlabeled, e))?;
            unlabeled_ids.push(parse_field(unlabeled, &record[0], "id")?);
        }
        let num_labels = map.values().max().map_or(0, |&m| m + 1);
        Ok(Self {
            assignments: map,
            unlabeled_ids,
            num_labels,
        })
    }

    /// Checks label contiguity, the size cap and that assigned and unlabeled
    /// ids partition `nodes`.
    pub fn check_invariants(&self, nodes: &[u64], max_size: usize) -> Result<()> {
        let clusters = self.clusters();
        if clusters.iter().any(Vec::is_empty) {
            return Err(CdpError::Invariant("pseudo-labels are not contiguous".into()));
        }
        if let Some(c) = clusters.iter().find(|c| c.len() > max_size) {
            return Err(CdpError::Invariant(format!(
                "cluster of size {} exceeds cap {max_size}",
                c.len()
            )));
        }
        let mut all: Vec<u64> = self.assignments.keys().copied().collect();
        all.extend_from_slice(&self.unlabeled_ids);
        all.sort_unstable();
        if all != nodes {
            return Err(CdpError::Invariant(
                "assigned and unlabeled ids do not partition the node set".into(),
            ));
        }
        Ok(())
    }
}

pub fn propagate(graph: &ConsensusGraph, cfg: &PropagationConfig) -> Result<LabelAssignment> {
    cfg.validate()?;
    let mut queue: VecDeque<(Vec<u64>, Vec<Edge>)> =
        components_of(&graph.nodes, &graph.edges).into();
    let mut out = LabelAssignment::default();
    while let Some((nodes, edges)) = queue.pop_front() {
        if nodes.len() > cfg.max_size {
            let s_min = edges
                .iter()
                .map(|e| e.score)
                .fold(f64::INFINITY, f64::min);
            let th = s_min + (1.0 - s_min) * cfg.step;
            let kept: Vec<Edge> = edges.iter().copied().filter(|e| e.score > th).collect();
            if kept.len() >= edges.len() {
                return Err(CdpError::Invariant(format!(
                    "split at threshold {th} removed no edge"
                )));
            }
            if !kept.is_empty() {
                let mut touched: Vec<u64> = kept.iter().flat_map(|e| [e.a, e.b]).collect();
                touched.sort_unstable();
                touched.dedup();
                queue.extend(components_of(&touched, &kept));
            }
        } else if nodes.len() == 1 && cfg.discard_singletons {
            continue;
        } else {
            for id in nodes {
                out.assignments.insert(id, out.num_labels);
            }
            out.num_labels += 1;
        }
    }
    out.unlabeled_ids = graph
        .nodes
        .iter()
        .copied()
        .filter(|id| !out.assignments.contains_key(id))
        .collect();
    Ok(out)
}

/// Per-node probability vectors over pseudo-labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftLabels {
    pub ids: Vec<u64>,
    pub num_labels: usize,
    /// Row-major `ids.len() x num_labels`.
    pub probs: Vec<f64>,
}

impl SoftLabels {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.probs[i * self.num_labels..(i + 1) * self.num_labels]
    }

    /// Stores the matrix in the embedding container (`dim = num_labels`).
    pub fn to_embedding_set(&self) -> Result<EmbeddingSet> {
        if self.num_labels == 0 {
            return EmbeddingSet::new(Vec::new(), Vec::new(), 1);
        }
        EmbeddingSet::new(
            self.ids.clone(),
            self.probs.iter().map(|&p| p as f32).collect(),
            self.num_labels,
        )
    }
}

/// Decayed breadth-first label diffusion.
///
/// For every labeled node a BFS over the consensus graph (unweighted, through
/// labeled and unlabeled nodes alike) reaches nodes at hop distance
/// `d <= depth`; each reached labeled node adds `decay^d` to the bucket of its
/// hard label. Rows are normalized at the end, so `depth = 0` yields the hard
/// labels as one-hot vectors.
pub fn soft_labels(
    hard: &LabelAssignment,
    graph: &ConsensusGraph,
    depth: usize,
    decay: f64,
) -> Result<SoftLabels> {
    if !(decay > 0.0 && decay <= 1.0) {
        return Err(CdpError::config("decay", "must lie in (0, 1]"));
    }
    let num_labels = hard.num_labels as usize;
    let adj = graph.adjacency();
    let labels: Vec<Option<u32>> = graph.nodes.iter().map(|&id| hard.label_of(id)).collect();
    let sources: Vec<(u64, usize)> = hard
        .assignments
        .keys()
        .map(|&id| {
            graph
                .nodes
                .binary_search(&id)
                .map(|i| (id, i))
                .map_err(|_| CdpError::UnknownId(id))
        })
        .collect::<Result<_>>()?;
    let rows: Vec<Vec<f64>> = sources
        .par_iter()
        .map(|&(_, src)| {
            let mut row = vec![0.0; num_labels];
            let mut dist = BTreeMap::from([(src, 0usize)]);
            let mut queue = VecDeque::from([src]);
            while let Some(u) = queue.pop_front() {
                let d = dist[&u];
                if let Some(l) = labels[u] {
                    row[l as usize] += decay.powi(d as i32);
                }
                if d == depth {
                    continue;
                }
                for &v in &adj[u] {
                    if let std::collections::btree_map::Entry::Vacant(e) = dist.entry(v) {
                        e.insert(d + 1);
                        queue.push_back(v);
                    }
                }
            }
            let total: f64 = row.iter().sum();
            row.iter_mut().for_each(|p| *p /= total);
            row
        })
        .collect();
    Ok(SoftLabels {
        ids: sources.iter().map(|s| s.0).collect(),
        num_labels,
        probs: rows.concat(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn graph(n: u64, edges: &[(u64, u64, f64)]) -> ConsensusGraph {
        ConsensusGraph::new(
            (0..n).collect(),
            edges
                .iter()
                .map(|&(a, b, score)| Edge { a, b, score })
                .collect(),
        )
        .unwrap()
    }

    fn cfg(max_size: usize) -> PropagationConfig {
        PropagationConfig {
            max_size,
            ..Default::default()
        }
    }

    #[test]
    fn edgeless_graph_has_singletons() {
        assert_eq!(
            connected_components(&graph(3, &[])),
            vec![vec![0], vec![1], vec![2]]
        );
    }

    #[test]
    fn path_is_one_component() {
        let g = graph(3, &[(0, 1, 0.5), (1, 2, 0.5)]);
        assert_eq!(connected_components(&g), vec![vec![0, 1, 2]]);
    }

    #[test]
    fn small_component_gets_one_label() {
        let g = graph(4, &[(0, 1, 0.1), (1, 2, 0.99), (2, 3, 0.3)]);
        let a = propagate(&g, &cfg(4)).unwrap();
        assert_eq!(a.num_labels, 1);
        assert!(a.unlabeled_ids.is_empty());
    }

    #[test]
    fn uniform_triangle_over_cap_vanishes() {
        let g = graph(3, &[(0, 1, 0.9), (1, 2, 0.9), (0, 2, 0.9)]);
        let a = propagate(&g, &cfg(2)).unwrap();
        assert!(a.assignments.is_empty());
        assert_eq!(a.unlabeled_ids, vec![0, 1, 2]);
    }

    #[test]
    fn chain_splits_at_weakest_link() {
        let g = graph(4, &[(0, 1, 0.99), (1, 2, 0.95), (2, 3, 0.99)]);
        let a = propagate(&g, &cfg(2)).unwrap();
        assert_eq!(a.clusters(), vec![vec![0, 1], vec![2, 3]]);
        assert!(a.unlabeled_ids.is_empty());
    }

    #[test]
    fn invalid_parameters_rejected() {
        let g = graph(2, &[]);
        for (step, m) in [(1.0, 3), (0.0, 3), (0.1, 0)] {
            let c = PropagationConfig {
                max_size: m,
                step,
                discard_singletons: false,
            };
            assert!(matches!(propagate(&g, &c), Err(CdpError::InvalidConfig { .. })));
        }
    }

    #[test]
    fn singletons_discarded_on_request() {
        let g = graph(3, &[(0, 1, 0.5)]);
        let keep = propagate(&g, &cfg(5)).unwrap();
        assert_eq!(keep.num_labels, 2);
        let c = PropagationConfig {
            discard_singletons: true,
            ..cfg(5)
        };
        let drop = propagate(&g, &c).unwrap();
        assert_eq!(drop.num_labels, 1);
        assert_eq!(drop.unlabeled_ids, vec![2]);
    }

    #[test]
    fn graph_validation() {
        let bad = ConsensusGraph::new(vec![0, 1], vec![Edge { a: 0, b: 5, score: 0.5 }]);
        assert!(matches!(bad, Err(CdpError::UnknownId(5))));
        let dup = ConsensusGraph::new(
            vec![0, 1],
            vec![Edge { a: 0, b: 1, score: 0.5 }, Edge { a: 1, b: 0, score: 0.4 }],
        );
        assert!(dup.is_err());
        let range = ConsensusGraph::new(vec![0, 1], vec![Edge { a: 0, b: 1, score: 1.5 }]);
        assert!(range.is_err());
    }

    #[test]
    fn depth_zero_is_one_hot() {
        let g = graph(5, &[(0, 1, 0.99), (1, 2, 0.95), (2, 3, 0.99), (3, 4, 0.97)]);
        let hard = propagate(&g, &cfg(2)).unwrap();
        let soft = soft_labels(&hard, &g, 0, 0.5).unwrap();
        for (i, id) in soft.ids.iter().enumerate() {
            let mut one_hot = vec![0.0; soft.num_labels];
            one_hot[hard.label_of(*id).unwrap() as usize] = 1.0;
            assert_eq!(soft.row(i), one_hot.as_slice());
        }
    }

    #[test]
    fn isolated_node_stays_one_hot() {
        let g = graph(3, &[(0, 1, 0.9)]);
        let hard = propagate(&g, &cfg(5)).unwrap();
        let soft = soft_labels(&hard, &g, 4, 0.7).unwrap();
        let i = soft.ids.iter().position(|&id| id == 2).unwrap();
        let l = hard.label_of(2).unwrap() as usize;
        assert_eq!(soft.row(i)[l], 1.0);
    }

    #[test]
    fn cross_cluster_edge_diffuses_half() {
        // two nodes joined by an edge but labeled apart
        let g = graph(2, &[(0, 1, 0.9)]);
        let hard = LabelAssignment {
            assignments: BTreeMap::from([(0, 0), (1, 1)]),
            unlabeled_ids: vec![],
            num_labels: 2,
        };
        let soft = soft_labels(&hard, &g, 1, 0.5).unwrap();
        let (own, other) = (1.0 / 1.5, 0.5 / 1.5);
        assert!((soft.row(0)[0] - own).abs() < 1e-12 && (soft.row(0)[1] - other).abs() < 1e-12);
        assert!((soft.row(1)[1] - own).abs() < 1e-12 && (soft.row(1)[0] - other).abs() < 1e-12);
    }

    #[test]
    fn soft_label_hyperparameters_checked() {
        let g = graph(2, &[]);
        let hard = propagate(&g, &cfg(2)).unwrap();
        assert!(soft_labels(&hard, &g, 1, 0.0).is_err());
        assert!(soft_labels(&hard, &g, 1, 1.5).is_err());
    }

    #[test]
    fn assignment_csv_round_trip() {
        let g = graph(5, &[(0, 1, 0.99), (1, 2, 0.95), (2, 3, 0.99)]);
        let a = propagate(&g, &cfg(2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (p, u) = (dir.path().join("a.csv"), dir.path().join("u.csv"));
        a.save(&p, &u).unwrap();
        assert_eq!(LabelAssignment::load(&p, &u).unwrap(), a);
    }

    fn random_graph() -> impl Strategy<Value = ConsensusGraph> {
        (1u64..14).prop_flat_map(|n| {
            prop::collection::vec((0..n, 0..n, prop_oneof![Just(0.5), Just(1.0), 0.0f64..=1.0]), 0..40)
                .prop_map(move |raw| {
                    let mut seen = std::collections::BTreeSet::new();
                    let edges = raw
                        .into_iter()
                        .filter(|&(a, b, _)| a != b)
                        .filter(|&(a, b, _)| seen.insert((a.min(b), a.max(b))))
                        .map(|(a, b, score)| Edge { a, b, score })
                        .collect();
                    ConsensusGraph::new((0..n).collect(), edges).unwrap()
                })
        })
    }

    proptest! {
        #[test]
        fn propagation_invariants(g in random_graph(), m in 1usize..6, step in 0.01f64..0.99) {
            let c = PropagationConfig { max_size: m, step, discard_singletons: false };
            let a = propagate(&g, &c).unwrap();
            a.check_invariants(g.nodes(), m).unwrap();
        }

        #[test]
        fn soft_rows_normalized(g in random_graph(), depth in 0usize..4, decay in 0.05f64..=1.0) {
            let a = propagate(&g, &cfg(3)).unwrap();
            let s = soft_labels(&a, &g, depth, decay).unwrap();
            for i in 0..s.ids.len() {
                let total: f64 = s.row(i).iter().sum();
                prop_assert!((total - 1.0).abs() < 1e-9);
                prop_assert!(s.row(i).iter().all(|&p| p >= 0.0));
            }
        }
    }
}
