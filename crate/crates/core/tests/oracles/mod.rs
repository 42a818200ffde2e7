//! Slow, independent reference implementations shared by the integration and
//! acceptance tests.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use cdp_core::mediator::MediatorModel;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Exhaustive k-NN: every other node sorted by cosine similarity (descending,
/// ties by ascending id), truncated to `min(k, n - 1)`.
pub fn exhaustive_knn(ids: &[u64], rows: &[Vec<f32>], k: usize) -> Vec<Vec<(u64, f64)>> {
    let cos = |u: &[f32], v: &[f32]| {
        let (mut uv, mut uu, mut vv) = (0.0f64, 0.0f64, 0.0f64);
        for (&a, &b) in u.iter().zip(v) {
            let (a, b) = (a as f64, b as f64);
            uv += a * b;
            uu += a * a;
            vv += b * b;
        }
        uv / (uu.sqrt() * vv.sqrt())
    };
    (0..ids.len())
        .map(|i| {
            let mut all: Vec<(u64, f64)> = (0..ids.len())
                .filter(|&j| j != i)
                .map(|j| (ids[j], cos(&rows[i], &rows[j])))
                .collect();
            all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            all.truncate(k.min(ids.len() - 1));
            all
        })
        .collect()
}

/// Random point cloud; with `duplicates` some rows are exact copies of
/// earlier ones so that the tie-break decides.
pub fn random_points(rng: &mut ChaCha8Rng, n: usize, d: usize, duplicates: bool) -> Vec<Vec<f32>> {
    let mut rows: Vec<Vec<f32>> = Vec::with_capacity(n);
    for i in 0..n {
        if duplicates && i > 0 && rng.random_bool(0.2) {
            let j = rng.random_range(0..i);
            rows.push(rows[j].clone());
            continue;
        }
        loop {
            let r: Vec<f32> = (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            if r.iter().any(|&x| x != 0.0) {
                rows.push(r);
                break;
            }
        }
    }
    rows
}

/// Union-find over arbitrary ids.
pub struct UnionFind {
    parent: BTreeMap<u64, u64>,
}

impl UnionFind {
    pub fn new(nodes: impl IntoIterator<Item = u64>) -> Self {
        Self {
            parent: nodes.into_iter().map(|n| (n, n)).collect(),
        }
    }

    pub fn find(&mut self, x: u64) -> u64 {
        let p = self.parent[&x];
        if p == x {
            return x;
        }
        let root = self.find(p);
        self.parent.insert(x, root);
        root
    }

    pub fn union(&mut self, a: u64, b: u64) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent.insert(hi, lo);
        }
    }

    /// Groups sorted internally and by smallest member.
    pub fn groups(&mut self) -> Vec<Vec<u64>> {
        let nodes: Vec<u64> = self.parent.keys().copied().collect();
        let mut by_root: BTreeMap<u64, Vec<u64>> = BTreeMap::new();
        for n in nodes {
            let r = self.find(n);
            by_root.entry(r).or_default().push(n);
        }
        let mut groups: Vec<Vec<u64>> = by_root.into_values().collect();
        groups.sort_by_key(|g| g[0]);
        groups
    }
}

pub type ScoredEdge = (u64, u64, f64);

/// A component: its node set and the edges among them.
#[derive(Clone, Debug)]
struct Component {
    nodes: BTreeSet<u64>,
    edges: Vec<ScoredEdge>,
}

/// `find_connected_components`: components of the graph on `nodes`, sorted
/// by smallest member.
fn find_connected_components(nodes: &BTreeSet<u64>, edges: &[ScoredEdge]) -> Vec<Component> {
    let mut uf = UnionFind::new(nodes.iter().copied());
    for &(a, b, _) in edges {
        uf.union(a, b);
    }
    uf.groups()
        .into_iter()
        .map(|g| {
            let set: BTreeSet<u64> = g.into_iter().collect();
            let edges = edges
                .iter()
                .copied()
                .filter(|(a, _, _)| set.contains(a))
                .collect();
            Component { nodes: set, edges }
        })
        .collect()
}

/// Line-by-line label propagation with a FIFO queue. Returns node -> label
/// for labeled nodes; every other node is unlabeled.
pub fn propagation_oracle(
    nodes: &[u64],
    edges: &[ScoredEdge],
    max_size: usize,
    step: f64,
) -> BTreeMap<u64, u32> {
    assert!(step < 1.0);
    let all: BTreeSet<u64> = nodes.iter().copied().collect();
    let c0 = find_connected_components(&all, edges);
    let mut q: VecDeque<Component> = c0.into_iter().collect();
    let mut l = 0u32;
    let mut ret = BTreeMap::new();
    while let Some(c) = q.pop_front() {
        if c.nodes.len() > max_size {
            let e_old = &c.edges;
            let s_min = e_old.iter().map(|e| e.2).fold(f64::INFINITY, f64::min);
            let th = s_min + (1.0 - s_min) * step;
            let e_new: Vec<ScoredEdge> = e_old.iter().copied().filter(|e| e.2 > th).collect();
            if !e_new.is_empty() {
                // Graph(E_new): only the endpoints of surviving edges
                let touched: BTreeSet<u64> = e_new.iter().flat_map(|e| [e.0, e.1]).collect();
                q.extend(find_connected_components(&touched, &e_new));
            }
        } else {
            for &n in &c.nodes {
                ret.insert(n, l);
            }
            l += 1;
        }
    }
    ret
}

/// Random weighted graph on `0..n` with distinct endpoints and no duplicate
/// edges. Scores are sometimes drawn from a small set to create ties.
pub fn random_graph(rng: &mut ChaCha8Rng, n: usize, density: f64) -> (Vec<u64>, Vec<ScoredEdge>) {
    let nodes: Vec<u64> = (0..n as u64).collect();
    let coarse = rng.random_bool(0.3);
    let mut edges = Vec::new();
    for a in 0..n as u64 {
        for b in a + 1..n as u64 {
            if rng.random_bool(density) {
                let s = if coarse {
                    [0.2, 0.5, 0.9, 0.99][rng.random_range(0..4)]
                } else {
                    rng.random_range(0.0..=1.0)
                };
                edges.push((a, b, s));
            }
        }
    }
    (nodes, edges)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Same-label pair counts by brute force: `(both, same_a, same_b)` where
/// `both` counts pairs equal under both labelings. Ids absent from `a` never
/// pair under `a`.
pub fn pair_agreement(ids: &[u64], a: &BTreeMap<u64, u32>, b: &BTreeMap<u64, u32>) -> (u64, u64, u64) {
    let (mut both, mut sa, mut sb) = (0, 0, 0);
    for i in 0..ids.len() {
        for j in i + 1..ids.len() {
            let ea = matches!((a.get(&ids[i]), a.get(&ids[j])), (Some(x), Some(y)) if x == y);
            let eb = matches!((b.get(&ids[i]), b.get(&ids[j])), (Some(x), Some(y)) if x == y);
            sa += ea as u64;
            sb += eb as u64;
            both += (ea && eb) as u64;
        }
    }
    (both, sa, sb)
}

/// Independent forward pass: logits plus the on/off pattern of every hidden
/// unit, used to tell whether a finite-difference probe crossed a kink.
pub fn forward_pattern(model: &MediatorModel, x: &[f64]) -> Vec<bool> {
    let mut a: Vec<f64> = x
        .iter()
        .zip(&model.input_shift)
        .zip(&model.input_scale)
        .map(|((x, s), c)| (x - s) * c)
        .collect();
    let mut pattern = Vec::new();
    let last = model.layers.len() - 1;
    for (li, layer) in model.layers.iter().enumerate() {
        let z: Vec<f64> = (0..layer.outputs)
            .map(|o| {
                let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                layer.biases[o] + row.iter().zip(&a).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect();
        if li < last {
            pattern.extend(z.iter().map(|&v| v > 0.0));
            a = z.into_iter().map(|v| v.max(0.0)).collect();
        }
    }
    pattern
}

/// Worst relative error between analytic and central-difference gradients,
/// or `None` when some probe changes the hidden activation pattern (the loss
/// is not smooth over the probe there).
pub fn worst_gradient_error(model: &MediatorModel, xs: &[Vec<f64>], ys: &[bool], h: f64) -> Option<f64> {
    let (_, analytic) = model.loss_and_gradient(xs, ys);
    let base = model.parameters();
    let patterns: Vec<Vec<bool>> = xs.iter().map(|x| forward_pattern(model, x)).collect();
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for i in 0..base.len() {
        let mut p = base.clone();
        let mut losses = [0.0; 2];
        for (slot, shift) in [h, -h].into_iter().enumerate() {
            p[i] = base[i] + shift;
            probe.set_parameters(&p);
            if xs.iter().zip(&patterns).any(|(x, pat)| forward_pattern(&probe, x) != *pat) {
                return None;
            }
            losses[slot] = probe.mean_loss(xs, ys);
        }
        let numeric = (losses[0] - losses[1]) / (2.0 * h);
        let scale = analytic[i].abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic[i] - numeric).abs() / scale);
    }
    Some(worst)
}

/// Gradient check of a fresh `6n + 5`-input model on the first random
/// 10-sample batch whose probes all stay on one side of every ReLU kink.
pub fn gradient_check(n: usize, model_seed: u64) -> Option<f64> {
    let dim = 6 * n + 5;
    let model = MediatorModel::init(n, dim, model_seed);
    (0..64).find_map(|seed| {
        let mut rng = rng(seed);
        let xs: Vec<Vec<f64>> = (0..10)
            .map(|_| (0..dim).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let ys: Vec<bool> = (0..10).map(|i| i % 3 == 0).collect();
        worst_gradient_error(&model, &xs, &ys, 1e-3)
    })
}
