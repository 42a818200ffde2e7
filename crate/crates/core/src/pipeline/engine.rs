//! In-memory building blocks shared by the staged commands and the sweeps.

use std::cmp::Ordering;

use crate::dataset::{
    generate_synthetic, load_embeddings, load_labels, load_split, EmbeddingSet, GroundTruth, Split,
    SyntheticDataset,
};
use crate::evaluation::{cluster_metrics, pair_metrics, ClusterMetrics, PairMetrics};
use crate::features::{compute_features, FeatureMatrix, FeatureSubset};
use crate::knn::{build_knn_graph, candidate_pairs, cosine_with_norms, norm, CandidatePair, KnnGraph};
use crate::mediator::{
    predict, select_pairs, train_mediator, training_pairs_from_graphs, vote_select_all,
    MediatorModel, SelectedEdge, TrainConfig, TrainLog, TrainingSet,
};
use crate::propagation::{propagate, ConsensusGraph, LabelAssignment, PropagationConfig};
use crate::{CdpError, Result};

use super::config::DataSource;

/// Raw inputs before partitioning. `models[0]` is the base model.
#[derive(Clone, Debug)]
pub struct SourceData {
    pub models: Vec<EmbeddingSet>,
    pub truth: GroundTruth,
    pub split: Split,
}

impl SourceData {
    pub fn load(source: &DataSource) -> Result<Self> {
        match source {
            DataSource::Synthetic(cfg) => {
                let ds = generate_synthetic(cfg)?;
                let mut models = vec![ds.base];
                models.extend(ds.committee);
                Ok(Self {
                    models,
                    truth: ds.truth,
                    split: ds.split,
                })
            }
            DataSource::Files(f) => {
                let mut models = vec![load_embeddings(&f.base)?];
                for p in &f.committee {
                    models.push(load_embeddings(p)?);
                }
                Ok(Self {
                    models,
                    truth: load_labels(&f.labels)?.truth,
                    split: load_split(&f.split)?,
                })
            }
        }
    }

    pub fn partition(&self) -> Result<Partitioned> {
        Partitioned::new(&self.models, &self.truth, &self.split)
    }
}

/// Every model's embeddings restricted to each side of the split. Index 0 is
/// the base model.
#[derive(Clone, Debug)]
pub struct Partitioned {
    pub labeled: Vec<EmbeddingSet>,
    pub unlabeled: Vec<EmbeddingSet>,
    pub labeled_truth: GroundTruth,
    pub unlabeled_truth: GroundTruth,
}

impl Partitioned {
    pub fn new(models: &[EmbeddingSet], truth: &GroundTruth, split: &Split) -> Result<Self> {
        if models.is_empty() {
            return Err(CdpError::Validation("no base model".into()));
        }
        crate::dataset::check_aligned(models)?;
        if truth.ids() != models[0].ids() {
            return Err(CdpError::Validation(
                "labels and embeddings cover different ids".into(),
            ));
        }
        if !split.is_identity_disjoint(truth)? {
            log::warn!("labeled and unlabeled partitions share identities");
        }
        let (l, u) = (split.labeled_ids(), split.unlabeled_ids());
        Ok(Self {
            labeled: models.iter().map(|m| m.subset(&l)).collect::<Result<_>>()?,
            unlabeled: models.iter().map(|m| m.subset(&u)).collect::<Result<_>>()?,
            labeled_truth: truth.subset(&l)?,
            unlabeled_truth: truth.subset(&u)?,
        })
    }

    pub fn from_synthetic(ds: &SyntheticDataset) -> Result<Self> {
        let mut models = vec![ds.base.clone()];
        models.extend(ds.committee.iter().cloned());
        Self::new(&models, &ds.truth, &ds.split)
    }

    pub fn num_committee(&self) -> usize {
        self.labeled.len() - 1
    }
}

/// k-NN graphs of every model on both sides of the split.
#[derive(Clone, Debug)]
pub struct GraphSet {
    pub labeled: Vec<KnnGraph>,
    pub unlabeled: Vec<KnnGraph>,
}

impl GraphSet {
    pub fn build(data: &Partitioned, k: usize) -> Result<Self> {
        let build = |sets: &[EmbeddingSet]| {
            sets.iter()
                .map(|s| build_knn_graph(s, k))
                .collect::<Result<Vec<_>>>()
        };
        Ok(Self {
            labeled: build(&data.labeled)?,
            unlabeled: build(&data.unlabeled)?,
        })
    }

    pub fn truncated(&self, k: usize) -> Result<Self> {
        let cut = |gs: &[KnnGraph]| gs.iter().map(|g| g.truncated(k)).collect::<Result<Vec<_>>>();
        Ok(Self {
            labeled: cut(&self.labeled)?,
            unlabeled: cut(&self.unlabeled)?,
        })
    }
}

/// Training pairs from the labeled side and candidate features from the
/// unlabeled side, both with the full feature layout.
#[derive(Clone, Debug)]
pub struct PairFeatures {
    pub train: TrainingSet,
    pub candidates: FeatureMatrix,
}

impl PairFeatures {
    pub fn compute(data: &Partitioned, graphs: &GraphSet) -> Result<Self> {
        let train = training_pairs_from_graphs(&graphs.labeled, &data.labeled, &data.labeled_truth)?;
        let pairs = candidate_pairs(&graphs.unlabeled[0]);
        let candidates = compute_features(&pairs, &graphs.unlabeled, &data.unlabeled)?;
        Ok(Self { train, candidates })
    }
}

pub fn train_subset(
    features: &PairFeatures,
    subset: FeatureSubset,
    num_committee: usize,
    cfg: &TrainConfig,
) -> Result<(MediatorModel, TrainLog)> {
    let x = subset.project(&features.train.features, num_committee)?;
    train_mediator(&x, &features.train.targets, num_committee, cfg)
}

pub fn mediator_select(
    model: &MediatorModel,
    features: &PairFeatures,
    subset: FeatureSubset,
    threshold: f64,
) -> Result<Vec<SelectedEdge>> {
    let x = subset.project(&features.candidates, model.num_committee)?;
    let probs = predict(model, &x)?;
    select_pairs(&x.pairs, &probs, threshold)
}

/// Base-model cosine similarity of every candidate, clamped to `[0, 1]`.
pub fn base_affinity(pairs: &[CandidatePair], base: &EmbeddingSet) -> Result<Vec<f64>> {
    pairs
        .iter()
        .map(|p| {
            let (u, v) = (base.row_by_id(p.a)?, base.row_by_id(p.b)?);
            Ok(cosine_with_norms(u, v, norm(u), norm(v)).clamp(0.0, 1.0))
        })
        .collect()
}

/// Pairs voted for by all of the first `members` committee graphs, each with
/// weight `votes / members`, so always 1. With no members every candidate is
/// kept and weighted by base affinity. With `keep = Some(c)` only the `c` pairs
/// of highest base affinity survive (ties by pair order), which makes rows with
/// different committee sizes comparable at equal pair count.
pub fn vote_select_top(
    data: &Partitioned,
    graphs: &GraphSet,
    members: usize,
    keep: Option<usize>,
) -> Result<Vec<SelectedEdge>> {
    if members > data.num_committee() {
        return Err(CdpError::config(
            "committee_counts",
            format!("{members} exceeds committee size {}", data.num_committee()),
        ));
    }
    let candidates = candidate_pairs(&graphs.unlabeled[0]);
    let voted: Vec<CandidatePair> = if members == 0 {
        candidates
    } else {
        vote_select_all(&candidates, &graphs.unlabeled[1..=members], members)?
            .into_iter()
            .map(|e| e.pair)
            .collect()
    };
    let affinity = base_affinity(&voted, &data.unlabeled[0])?;
    let mut ranked: Vec<(CandidatePair, f64)> = voted.into_iter().zip(affinity).collect();
    if let Some(c) = keep {
        if c < ranked.len() {
            ranked.sort_by(|x, y| {
                y.1.partial_cmp(&x.1)
                    .unwrap_or(Ordering::Equal)
                    .then(x.0.cmp(&y.0))
            });
            ranked.truncate(c);
            ranked.sort_by_key(|e| e.0);
        }
    }
    Ok(ranked
        .into_iter()
        .map(|(pair, a)| SelectedEdge {
            pair,
            weight: if members == 0 { a } else { 1.0 },
        })
        .collect())
}

/// Result of propagating one selection and scoring it.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub selected: Vec<SelectedEdge>,
    pub pairs: PairMetrics,
    pub assignment: LabelAssignment,
    pub clusters: ClusterMetrics,
}

pub fn settle(
    selected: Vec<SelectedEdge>,
    truth: &GroundTruth,
    cfg: &PropagationConfig,
) -> Result<Outcome> {
    let graph = ConsensusGraph::from_selected(truth.ids().to_vec(), &selected)?;
    let assignment = propagate(&graph, cfg)?;
    assignment.check_invariants(truth.ids(), cfg.max_size)?;
    let chosen: Vec<CandidatePair> = selected.iter().map(|e| e.pair).collect();
    let pairs = pair_metrics(&chosen, truth, truth.ids())?;
    let clusters = cluster_metrics(&assignment, truth)?;
    Ok(Outcome {
        selected,
        pairs,
        assignment,
        clusters,
    })
}
