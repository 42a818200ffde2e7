//! Pair-selection and clustering quality metrics, plus the single-linkage
//! clustering baseline.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{EmbeddingSet, GroundTruth};
use crate::knn::{cosine_with_norms, norm, CandidatePair};
use crate::propagation::LabelAssignment;
use crate::{CdpError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub pair_count: usize,
    pub recall: f64,
    pub precision: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterMetrics {
    pub pairwise_recall: f64,
    pub pairwise_precision: f64,
}

fn pairs_in(count: usize) -> u64 {
    let c = count as u64;
    c * c.saturating_sub(1) / 2
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// Scores `selected` against all same-identity pairs inside `universe`.
///
/// Recall is measured against every positive pair of the universe, not just
/// the ones that were ever candidates. An empty selection has precision 1.
pub fn pair_metrics(
    selected: &[CandidatePair],
    truth: &GroundTruth,
    universe: &[u64],
) -> Result<PairMetrics> {
    let mut labels: HashMap<u64, u32> = HashMap::with_capacity(universe.len());
    let mut sizes: HashMap<u32, usize> = HashMap::new();
    for &id in universe {
        let l = truth.label_of(id)?;
        if labels.insert(id, l).is_none() {
            *sizes.entry(l).or_default() += 1;
        }
    }
    let positives: u64 = sizes.values().map(|&c| pairs_in(c)).sum();
    let mut hits = 0u64;
    for p in selected {
        let la = *labels.get(&p.a).ok_or(CdpError::UnknownId(p.a))?;
        let lb = *labels.get(&p.b).ok_or(CdpError::UnknownId(p.b))?;
        hits += u64::from(la == lb);
    }
    if selected.is_empty() {
        log::warn!("no pairs selected; precision reported as 1.0");
    }
    Ok(PairMetrics {
        pair_count: selected.len(),
        recall: if positives == 0 { 0.0 } else { hits as f64 / positives as f64 },
        precision: ratio(hits, selected.len() as u64),
    })
}

/// Pairwise recall and precision of a pseudo-labeling over every truth id.
///
/// Unassigned ids still count in the recall denominator but never enter
/// precision.
pub fn cluster_metrics(assign: &LabelAssignment, truth: &GroundTruth) -> Result<ClusterMetrics> {
    let mut truth_sizes: HashMap<u32, usize> = HashMap::new();
    for &l in truth.labels() {
        *truth_sizes.entry(l).or_default() += 1;
    }
    let mut cluster_sizes: HashMap<u32, usize> = HashMap::new();
    let mut joint: HashMap<(u32, u32), usize> = HashMap::new();
    for (&id, &pseudo) in &assign.assignments {
        let l = truth.label_of(id)?;
        *cluster_sizes.entry(pseudo).or_default() += 1;
        *joint.entry((pseudo, l)).or_default() += 1;
    }
    let same_truth: u64 = truth_sizes.values().map(|&c| pairs_in(c)).sum();
    let same_pseudo: u64 = cluster_sizes.values().map(|&c| pairs_in(c)).sum();
    let both: u64 = joint.values().map(|&c| pairs_in(c)).sum();
    Ok(ClusterMetrics {
        pairwise_recall: ratio(both, same_truth),
        pairwise_precision: ratio(both, same_pseudo),
    })
}

struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = (ra.min(rb), ra.max(rb));
            self.parent[hi] = lo;
        }
    }
}

/// Single-linkage clustering: link every pair with cosine similarity
/// `>= threshold`, take connected components and drop singletons. Labels
/// follow the smallest member id.
pub fn hierarchical_baseline(base: &EmbeddingSet, threshold: f64) -> Result<LabelAssignment> {
    if !(-1.0..=1.0).contains(&threshold) {
        return Err(CdpError::config("threshold", "must lie in [-1, 1]"));
    }
    let n = base.len();
    let norms: Vec<f64> = (0..n).map(|i| norm(base.row(i))).collect();
    const CHUNK: usize = 64;
    let partial: Vec<DisjointSet> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut dsu = DisjointSet::new(n);
            for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                let u = base.row(i);
                for j in i + 1..n {
                    if cosine_with_norms(u, base.row(j), norms[i], norms[j]) >= threshold {
                        dsu.union(i, j);
                    }
                }
            }
            dsu
        })
        .collect();
    let mut dsu = DisjointSet::new(n);
    for mut part in partial {
        for i in 0..n {
            let r = part.find(i);
            dsu.union(i, r);
        }
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        let r = dsu.find(i);
        members[r].push(i);
    }
    let mut out = LabelAssignment::default();
    // roots are the smallest index of their set, so this walks components in
    // order of smallest member
    for group in members.iter().filter(|g| !g.is_empty()) {
        if group.len() == 1 {
            out.unlabeled_ids.push(base.ids()[group[0]]);
            continue;
        }
        for &i in group {
            out.assignments.insert(base.ids()[i], out.num_labels);
        }
        out.num_labels += 1;
    }
    out.unlabeled_ids.sort_unstable();
    Ok(out)
}

/// Pairwise F1 of a labeling; 0 when both metrics are 0.
pub fn pairwise_f1(m: &ClusterMetrics) -> f64 {
    let s = m.pairwise_recall + m.pairwise_precision;
    if s == 0.0 {
        0.0
    } else {
        2.0 * m.pairwise_recall * m.pairwise_precision / s
    }
}

/// Picks the baseline threshold from `grid` that maximizes pairwise F1 on a
/// labeled set. Ties go to the earlier grid value.
pub fn tune_baseline_threshold(
    labeled: &EmbeddingSet,
    truth: &GroundTruth,
    grid: &[f64],
) -> Result<f64> {
    let mut best: Option<(f64, f64)> = None;
    for &th in grid {
        let assign = hierarchical_baseline(labeled, th)?;
        let f1 = pairwise_f1(&cluster_metrics(&assign, truth)?);
        if best.is_none_or(|(_, b)| f1 > b) {
            best = Some((th, f1));
        }
    }
    best.map(|(th, _)| th)
        .ok_or_else(|| CdpError::config("baseline_grid", "must not be empty"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn truth(labels: &[u32]) -> GroundTruth {
        GroundTruth::from_pairs(labels.iter().enumerate().map(|(i, &l)| (i as u64, l)))
            .unwrap()
            .0
    }

    fn assignment(labels: &[Option<u32>]) -> LabelAssignment {
        let mut a = LabelAssignment::default();
        for (i, l) in labels.iter().enumerate() {
            match l {
                Some(l) => {
                    a.assignments.insert(i as u64, *l);
                    a.num_labels = a.num_labels.max(l + 1);
                }
                None => a.unlabeled_ids.push(i as u64),
            }
        }
        a
    }

    fn brute_cluster(assign: &[Option<u32>], labels: &[u32]) -> (f64, f64) {
        let (mut both, mut same_t, mut same_p) = (0, 0, 0);
        for i in 0..labels.len() {
            for j in i + 1..labels.len() {
                let t = labels[i] == labels[j];
                let p = assign[i].is_some() && assign[i] == assign[j];
                same_t += t as u32;
                same_p += p as u32;
                both += (t && p) as u32;
            }
        }
        let r = if same_t == 0 { 1.0 } else { both as f64 / same_t as f64 };
        let p = if same_p == 0 { 1.0 } else { both as f64 / same_p as f64 };
        (r, p)
    }

    #[test]
    fn perfect_selection() {
        let t = truth(&[0, 0, 0, 1, 1]);
        let sel: Vec<_> = [(0, 1), (0, 2), (1, 2), (3, 4)]
            .iter()
            .map(|&(a, b)| CandidatePair::new(a, b).unwrap())
            .collect();
        let m = pair_metrics(&sel, &t, t.ids()).unwrap();
        assert_eq!((m.pair_count, m.recall, m.precision), (4, 1.0, 1.0));
    }

    #[test]
    fn empty_selection() {
        let t = truth(&[0, 0, 1]);
        let m = pair_metrics(&[], &t, t.ids()).unwrap();
        assert_eq!((m.recall, m.precision), (0.0, 1.0));
    }

    #[test]
    fn pair_outside_universe_rejected() {
        let t = truth(&[0, 0, 1, 1]);
        let sel = [CandidatePair::new(0, 3).unwrap()];
        assert!(pair_metrics(&sel, &t, &[0, 1, 2]).is_err());
    }

    #[test]
    fn identical_assignment_is_perfect() {
        let labels = [0, 0, 1, 1, 1, 2];
        let a = assignment(&labels.map(Some));
        let m = cluster_metrics(&a, &truth(&labels)).unwrap();
        assert_eq!((m.pairwise_recall, m.pairwise_precision), (1.0, 1.0));
    }

    #[test]
    fn single_cluster_has_full_recall() {
        let labels = [0, 0, 1, 1, 2];
        let a = assignment(&[Some(0); 5]);
        let m = cluster_metrics(&a, &truth(&labels)).unwrap();
        assert_eq!(m.pairwise_recall, 1.0);
        assert!(m.pairwise_precision < 1.0);
    }

    #[test]
    fn unknown_assigned_id_rejected() {
        let mut a = assignment(&[Some(0), Some(0)]);
        a.assignments.insert(9, 0);
        assert!(cluster_metrics(&a, &truth(&[0, 0])).is_err());
    }

    #[test]
    fn splitting_across_identities_can_lower_precision() {
        // {a,a,b,b} -> {a,b},{a,b}: precision 1/3 -> 0
        let labels = [0, 0, 1, 1];
        let t = truth(&labels);
        let before = cluster_metrics(&assignment(&[Some(0); 4]), &t).unwrap();
        let after = cluster_metrics(&assignment(&[Some(0), Some(1), Some(0), Some(1)]), &t).unwrap();
        assert!(after.pairwise_precision < before.pairwise_precision);
        assert!(after.pairwise_recall <= before.pairwise_recall);
    }

    fn two_blobs() -> (EmbeddingSet, Vec<u32>) {
        let mut v = Vec::new();
        let mut labels = Vec::new();
        for i in 0..10 {
            let e = 0.01 * i as f32;
            if i % 2 == 0 {
                v.extend([1.0, e, 0.0]);
                labels.push(0);
            } else {
                v.extend([0.0, e, 1.0]);
                labels.push(1);
            }
        }
        (EmbeddingSet::new((0..10).collect(), v, 3).unwrap(), labels)
    }

    #[test]
    fn baseline_separates_blobs() {
        let (set, labels) = two_blobs();
        let a = hierarchical_baseline(&set, 0.5).unwrap();
        assert_eq!(a.num_labels, 2);
        let m = cluster_metrics(&a, &truth(&labels)).unwrap();
        assert_eq!((m.pairwise_recall, m.pairwise_precision), (1.0, 1.0));
    }

    #[test]
    fn baseline_threshold_extremes() {
        let (set, _) = two_blobs();
        assert!(hierarchical_baseline(&set, 1.01).is_err());
        let all = hierarchical_baseline(&set, -1.0).unwrap();
        assert_eq!(all.num_labels, 1);
        assert_eq!(all.assignments.len(), 10);
    }

    #[test]
    fn baseline_drops_singletons() {
        let set = EmbeddingSet::new(vec![0, 1, 2], vec![1.0, 0.0, 1.0, 0.01, 0.0, 1.0], 2).unwrap();
        let a = hierarchical_baseline(&set, 0.9).unwrap();
        assert_eq!(a.unlabeled_ids, vec![2]);
        assert_eq!(a.clusters(), vec![vec![0, 1]]);
    }

    #[test]
    fn tuning_prefers_separating_threshold() {
        let (set, labels) = two_blobs();
        let th = tune_baseline_threshold(&set, &truth(&labels), &[-1.0, 0.5, 0.99999]).unwrap();
        assert_eq!(th, 0.5);
    }

    fn labeled_case() -> impl Strategy<Value = (Vec<u32>, Vec<Option<u32>>)> {
        (2usize..30).prop_flat_map(|n| {
            (
                prop::collection::vec(0u32..4, n),
                prop::collection::vec(prop::option::weighted(0.8, 0u32..5), n),
            )
        })
    }

    fn compact(raw: &[Option<u32>]) -> Vec<Option<u32>> {
        let mut map = BTreeMap::new();
        raw.iter()
            .map(|l| {
                l.map(|l| {
                    let next = map.len() as u32;
                    *map.entry(l).or_insert(next)
                })
            })
            .collect()
    }

    proptest! {
        #[test]
        fn cluster_metrics_match_enumeration((labels, raw) in labeled_case()) {
            let assign = compact(&raw);
            let m = cluster_metrics(&assignment(&assign), &truth(&labels)).unwrap();
            let (r, p) = brute_cluster(&assign, &labels);
            prop_assert!((m.pairwise_recall - r).abs() < 1e-12);
            prop_assert!((m.pairwise_precision - p).abs() < 1e-12);
        }

        #[test]
        fn pair_metrics_match_enumeration(labels in prop::collection::vec(0u32..5, 20), mask in prop::collection::vec(any::<bool>(), 190)) {
            let t = truth(&labels);
            let mut sel = Vec::new();
            let (mut hits, mut pos, mut idx) = (0, 0, 0);
            for i in 0..20u64 {
                for j in i + 1..20 {
                    let same = labels[i as usize] == labels[j as usize];
                    pos += same as u32;
                    if mask[idx] {
                        sel.push(CandidatePair::new(i, j).unwrap());
                        hits += same as u32;
                    }
                    idx += 1;
                }
            }
            let m = pair_metrics(&sel, &t, t.ids()).unwrap();
            let recall = if pos == 0 { 0.0 } else { hits as f64 / pos as f64 };
            let precision = if sel.is_empty() { 1.0 } else { hits as f64 / sel.len() as f64 };
            prop_assert_eq!(m.pair_count, sel.len());
            prop_assert!((m.recall - recall).abs() < 1e-12);
            prop_assert!((m.precision - precision).abs() < 1e-12);
        }

        #[test]
        fn relabeling_is_invisible((labels, raw) in labeled_case(), shift in 1u32..7) {
            let assign = compact(&raw);
            let k = assign.iter().flatten().max().map_or(1, |m| m + 1);
            let permuted: Vec<_> = assign.iter().map(|l| l.map(|l| (l + shift) % k)).collect();
            let t = truth(&labels);
            let a = cluster_metrics(&assignment(&assign), &t).unwrap();
            let b = cluster_metrics(&assignment(&permuted), &t).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn refinement_lowers_recall((labels, raw) in labeled_case(), coin in prop::collection::vec(any::<bool>(), 30)) {
            let assign = compact(&raw);
            let Some(target) = assign.iter().flatten().copied().max() else { return Ok(()); };
            let fresh = target + 1;
            let split: Vec<_> = assign
                .iter()
                .zip(&coin)
                .map(|(l, &c)| match l {
                    Some(l) if *l == target && c => Some(fresh),
                    other => *other,
                })
                .collect();
            let t = truth(&labels);
            let before = cluster_metrics(&assignment(&assign), &t).unwrap();
            let after = cluster_metrics(&assignment(&compact(&split)), &t).unwrap();
            prop_assert!(after.pairwise_recall <= before.pairwise_recall + 1e-12);
        }

        #[test]
        fn identity_aligned_split_raises_precision((labels, raw) in labeled_case(), moved in 0u32..4) {
            let assign = compact(&raw);
            let Some(target) = assign.iter().flatten().copied().max() else { return Ok(()); };
            let fresh = target + 1;
            let split: Vec<_> = assign
                .iter()
                .zip(&labels)
                .map(|(l, &t)| match l {
                    Some(l) if *l == target && t == moved => Some(fresh),
                    other => *other,
                })
                .collect();
            let t = truth(&labels);
            let before = cluster_metrics(&assignment(&assign), &t).unwrap();
            let after = cluster_metrics(&assignment(&compact(&split)), &t).unwrap();
            prop_assert!(after.pairwise_precision + 1e-12 >= before.pairwise_precision);
            prop_assert!(after.pairwise_recall <= before.pairwise_recall + 1e-12);
        }
    }
}
