//! Ablation sweeps over committee size, mediator inputs, k and committee
//! heterogeneity.
//!
//! Row names:
//! - `clustering`: single-linkage baseline on the base model.
//! - `voting:n=<c>`: unanimous vote of the first `c` committee members, cut to
//!   the pair count of the full committee's vote so rows compare at equal
//!   size. `n=0` ranks all candidates by base similarity.
//! - `mediator:n=<N>:<inputs>`: mediator on each input subset.
//! - `mediator:k=<k>`: the full-input mediator trained at the configured `k`
//!   and applied to candidates and features of a `k`-NN graph, so only graph
//!   density varies between rows.
//! - `homogeneous:*` / `heterogeneous:*`: all-member voting and the full
//!   mediator with identical or varied view parameters (synthetic data only).

use log::info;

use crate::dataset::SyntheticConfig;
use crate::evaluation::{cluster_metrics, hierarchical_baseline, tune_baseline_threshold};
use crate::features::{compute_features, FeatureSubset};
use crate::knn::candidate_pairs;
use crate::mediator::{predict, select_pairs, MediatorModel};
use crate::Result;

use super::config::{DataSource, PipelineConfig};
use super::engine::{
    mediator_select, settle, train_subset, vote_select_top, GraphSet, Outcome, PairFeatures,
    Partitioned, SourceData,
};
use super::report::ReportRow;

fn row(config: String, o: &Outcome) -> ReportRow {
    ReportRow::new(config, Some(&o.pairs), &o.clusters)
}

/// All-member voting and the full-input mediator on one dataset at the
/// configured `k`.
#[derive(Clone, Debug)]
pub struct CommitteeComparison {
    pub voting: Outcome,
    pub mediator: Outcome,
}

struct Prepared {
    data: Partitioned,
    graphs: GraphSet,
    features: PairFeatures,
}

impl Prepared {
    fn new(data: Partitioned, wide: &GraphSet, k: usize) -> Result<Self> {
        let graphs = wide.truncated(k)?;
        let features = PairFeatures::compute(&data, &graphs)?;
        Ok(Self {
            data,
            graphs,
            features,
        })
    }

    fn compare(&self, cfg: &PipelineConfig, model: &MediatorModel) -> Result<CommitteeComparison> {
        let truth = &self.data.unlabeled_truth;
        let n = self.data.num_committee();
        let votes = vote_select_top(&self.data, &self.graphs, n, None)?;
        let picked = mediator_select(model, &self.features, FeatureSubset::Full, cfg.mediator.threshold)?;
        Ok(CommitteeComparison {
            voting: settle(votes, truth, &cfg.propagation)?,
            mediator: settle(picked, truth, &cfg.propagation)?,
        })
    }

    fn full_model(&self, cfg: &PipelineConfig) -> Result<MediatorModel> {
        let n = self.data.num_committee();
        Ok(train_subset(&self.features, FeatureSubset::Full, n, &cfg.train_config())?.0)
    }
}

/// Runs the comparison on a synthetic dataset from scratch.
pub fn compare_committee(cfg: &PipelineConfig, synthetic: &SyntheticConfig) -> Result<CommitteeComparison> {
    let data = SourceData::load(&DataSource::Synthetic(synthetic.clone()))?.partition()?;
    let wide = GraphSet::build(&data, cfg.graph.k)?;
    let prepared = Prepared::new(data, &wide, cfg.graph.k)?;
    let model = prepared.full_model(cfg)?;
    prepared.compare(cfg, &model)
}

/// Mediator pairwise precision of the configured committee and of a
/// homogeneous one (every view with the same perturbation parameters).
pub fn heterogeneity_pair(cfg: &PipelineConfig) -> Result<(CommitteeComparison, CommitteeComparison)> {
    let DataSource::Synthetic(hetero) = cfg.source()? else {
        return Err(crate::CdpError::config(
            "ablation.heterogeneity",
            "needs synthetic data",
        ));
    };
    let homo = SyntheticConfig {
        view_heterogeneity: 0.0,
        ..hetero.clone()
    };
    Ok((compare_committee(cfg, &hetero)?, compare_committee(cfg, &homo)?))
}

/// Every ablation row for `cfg`, in a fixed order.
pub fn run_ablation(cfg: &PipelineConfig) -> Result<Vec<ReportRow>> {
    cfg.validate()?;
    let source = cfg.source()?;
    let data = SourceData::load(&source)?.partition()?;
    let n = data.num_committee();
    let ab = &cfg.ablation;
    let widest = ab.k_values.iter().copied().chain([cfg.graph.k]).max().unwrap_or(cfg.graph.k);
    let wide = GraphSet::build(&data, widest)?;
    let prepared = Prepared::new(data, &wide, cfg.graph.k)?;
    let (data, graphs) = (&prepared.data, &prepared.graphs);
    let truth = &data.unlabeled_truth;
    let mut rows = Vec::new();

    let th = tune_baseline_threshold(&data.labeled[0], &data.labeled_truth, &cfg.evaluation.baseline_thresholds)?;
    let baseline = hierarchical_baseline(&data.unlabeled[0], th)?;
    rows.push(ReportRow::new("clustering", None, &cluster_metrics(&baseline, truth)?));
    info!("ablation: clustering baseline at threshold {th}");

    let target = vote_select_top(data, graphs, n, None)?.len();
    for &c in &ab.committee_counts {
        let votes = vote_select_top(data, graphs, c, Some(target))?;
        rows.push(row(format!("voting:n={c}"), &settle(votes, truth, &cfg.propagation)?));
        info!("ablation: voting with {c} members done");
    }

    let mut full_model = None;
    for &subset in &ab.feature_subsets {
        let (model, _) = train_subset(&prepared.features, subset, n, &cfg.train_config())?;
        let picked = mediator_select(&model, &prepared.features, subset, cfg.mediator.threshold)?;
        rows.push(row(
            format!("mediator:n={n}:{}", subset.label()),
            &settle(picked, truth, &cfg.propagation)?,
        ));
        if subset == FeatureSubset::Full {
            full_model = Some(model);
        }
        info!("ablation: mediator on {} done", subset.label());
    }
    let full_model = match full_model {
        Some(m) => m,
        None => prepared.full_model(cfg)?,
    };

    for &k in &ab.k_values {
        let g = wide.truncated(k)?;
        let pairs = candidate_pairs(&g.unlabeled[0]);
        let x = compute_features(&pairs, &g.unlabeled, &data.unlabeled)?;
        let probs = predict(&full_model, &x)?;
        let picked = select_pairs(&x.pairs, &probs, cfg.mediator.threshold)?;
        rows.push(row(format!("mediator:k={k}"), &settle(picked, truth, &cfg.propagation)?));
        info!("ablation: k = {k} done");
    }

    if ab.heterogeneity {
        if let DataSource::Synthetic(hetero) = &source {
            let homo = SyntheticConfig {
                view_heterogeneity: 0.0,
                ..hetero.clone()
            };
            let h = compare_committee(cfg, &homo)?;
            rows.push(row("homogeneous:voting".into(), &h.voting));
            rows.push(row("homogeneous:mediator".into(), &h.mediator));
            let h = prepared.compare(cfg, &full_model)?;
            rows.push(row("heterogeneous:voting".into(), &h.voting));
            rows.push(row("heterogeneous:mediator".into(), &h.mediator));
            info!("ablation: heterogeneity rows done");
        } else {
            log::warn!("ablation: heterogeneity rows need synthetic data, skipped");
        }
    }
    Ok(rows)
}
