//! Staged pipeline with content-addressed artifact directories.
//!
//! Every stage writes into `<out>/<stage>-<hash16>/`, where the hash covers
//! the stage name and version, the config values the stage reads, and the
//! hashes of its upstream stages (file inputs are hashed by content). A
//! `manifest.json` records the hash, the upstream hashes and the SHA-256 of
//! every file; a directory without a matching manifest is never read.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::dataset::{
    load_embeddings, load_labels, load_split, save_embeddings, save_labels, save_split,
    EmbeddingSet,
};
use crate::dataset::io::{csv_error, csv_reader, parse_field};
use crate::evaluation::{
    cluster_metrics, hierarchical_baseline, pair_metrics, tune_baseline_threshold,
};
use crate::features::{mediator_input_len, FeatureMatrix};
use crate::knn::{CandidatePair, KnnGraph};
use crate::mediator::{
    inspect_first_layer, load_model, load_selected, predict, save_model, save_selected,
    select_pairs, train_mediator, TrainingSet,
};
use crate::propagation::{propagate, soft_labels, ConsensusGraph, LabelAssignment};
use crate::{CdpError, Result};

use super::config::{DataSource, PipelineConfig};
use super::engine::{settle, vote_select_top, GraphSet, PairFeatures, Partitioned, SourceData};
use super::report::{write_report, ReportRow};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Generate,
    Graph,
    Features,
    Train,
    Select,
    Propagate,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Generate,
        Stage::Graph,
        Stage::Features,
        Stage::Train,
        Stage::Select,
        Stage::Propagate,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Generate => "generate",
            Stage::Graph => "graph",
            Stage::Features => "features",
            Stage::Train => "train",
            Stage::Select => "select",
            Stage::Propagate => "propagate",
            Stage::Evaluate => "evaluate",
        }
    }

    /// Bumped whenever a stage's artifact layout or semantics change.
    pub fn version(self) -> u32 {
        1
    }

    pub fn upstream(self) -> &'static [Stage] {
        match self {
            Stage::Generate => &[],
            Stage::Graph => &[Stage::Generate],
            Stage::Features => &[Stage::Generate, Stage::Graph],
            Stage::Train => &[Stage::Features],
            Stage::Select => &[Stage::Generate, Stage::Features, Stage::Train],
            Stage::Propagate => &[Stage::Generate, Stage::Select],
            Stage::Evaluate => &[Stage::Generate, Stage::Graph, Stage::Select, Stage::Propagate],
        }
    }
}

impl FromStr for Stage {
    type Err = CdpError;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| CdpError::config("stage", format!("unknown stage {s:?}")))
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub version: u32,
    pub hash: String,
    pub upstream: BTreeMap<String, String>,
    pub files: BTreeMap<String, String>,
}

pub const MANIFEST: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CdpError::MissingInput(path.to_path_buf()),
        _ => CdpError::Io(e),
    })
}

/// A config bound to an output root, with every stage hash precomputed.
#[derive(Clone, Debug)]
pub struct Workspace {
    cfg: PipelineConfig,
    root: PathBuf,
    hashes: BTreeMap<Stage, String>,
}

impl Workspace {
    pub fn new(cfg: PipelineConfig, root: impl Into<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        let mut ws = Self {
            cfg,
            root: root.into(),
            hashes: BTreeMap::new(),
        };
        for stage in Stage::ALL {
            let upstream: Vec<&str> = stage.upstream().iter().map(|u| ws.hashes[u].as_str()).collect();
            let key = json!({
                "stage": stage.name(),
                "version": stage.version(),
                "params": ws.stage_params(stage)?,
                "upstream": upstream,
            });
            ws.hashes.insert(stage, sha256_hex(key.to_string().as_bytes()));
        }
        Ok(ws)
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn hash(&self, stage: Stage) -> &str {
        &self.hashes[&stage]
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.root.join(format!("{}-{}", stage.name(), &self.hashes[&stage][..16]))
    }

    /// Output directory of the ablation sweep, keyed like a stage on the data
    /// and every config section the sweep reads.
    pub fn ablation_dir(&self) -> PathBuf {
        let c = &self.cfg;
        let key = json!({
            "data": self.hashes[&Stage::Generate],
            "k": c.graph.k,
            "mediator": c.mediator,
            "train": c.train_config(),
            "propagation": c.propagation,
            "evaluation": c.evaluation,
            "ablation": c.ablation,
        });
        let hash = sha256_hex(key.to_string().as_bytes());
        self.root.join(format!("ablation-{}", &hash[..16]))
    }

    /// Config values each stage reads. Graph size and seeds reach later stages
    /// through the upstream hashes.
    fn stage_params(&self, stage: Stage) -> Result<serde_json::Value> {
        let c = &self.cfg;
        Ok(match stage {
            Stage::Generate => match c.source()? {
                DataSource::Synthetic(s) => json!({ "synthetic": s }),
                DataSource::Files(f) => {
                    let digests = f
                        .all_paths()
                        .into_iter()
                        .map(|p| Ok(sha256_hex(&read_bytes(p)?)))
                        .collect::<Result<Vec<_>>>()?;
                    json!({ "files": digests, "committee": f.committee.len() })
                }
            },
            Stage::Graph => json!({ "k": c.graph.k }),
            Stage::Features => json!({}),
            Stage::Train => json!({
                "train": c.train_config(),
                "features": c.mediator.features,
            }),
            Stage::Select => json!({ "threshold": c.mediator.threshold }),
            Stage::Propagate => json!({
                "propagation": c.propagation,
                "soft_labels": c.soft_labels,
            }),
            Stage::Evaluate => json!({
                "baseline_thresholds": c.evaluation.baseline_thresholds,
                "propagation": c.propagation,
            }),
        })
    }

    /// Checks that a stage's directory holds a complete, matching artifact set
    /// and returns the directory.
    pub fn open(&self, stage: Stage) -> Result<PathBuf> {
        let dir = self.stage_dir(stage);
        let manifest_path = dir.join(MANIFEST);
        if !manifest_path.is_file() {
            return Err(CdpError::MissingInput(dir));
        }
        let manifest: Manifest = serde_json::from_slice(&read_bytes(&manifest_path)?)
            .map_err(|e| CdpError::format(manifest_path.display().to_string(), e.to_string()))?;
        if manifest.stage != stage.name() || manifest.version != stage.version() {
            return Err(CdpError::StageMismatch(format!(
                "{} holds {} v{}, expected {} v{}",
                dir.display(),
                manifest.stage,
                manifest.version,
                stage.name(),
                stage.version()
            )));
        }
        if manifest.hash != self.hashes[&stage] {
            return Err(CdpError::StageMismatch(format!(
                "{} was built from a different config",
                dir.display()
            )));
        }
        for (name, digest) in &manifest.files {
            if sha256_hex(&read_bytes(&dir.join(name))?) != *digest {
                return Err(CdpError::StageMismatch(format!(
                    "{} changed since {} was written",
                    name,
                    stage.name()
                )));
            }
        }
        Ok(dir)
    }

    /// Runs one stage. With `reuse`, an already complete artifact set is kept
    /// as is. Output is staged in a scratch directory and moved into place.
    pub fn run(&self, stage: Stage, reuse: bool) -> Result<PathBuf> {
        if reuse {
            match self.open(stage) {
                Ok(dir) => {
                    log::info!("{stage}: reusing {}", dir.display());
                    return Ok(dir);
                }
                Err(CdpError::MissingInput(_)) => {}
                Err(e) => log::warn!("{stage}: rebuilding ({e})"),
            }
        }
        let upstream = stage
            .upstream()
            .iter()
            .map(|&u| Ok((u, self.open(u)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        let dir = self.stage_dir(stage);
        fs::create_dir_all(&self.root)?;
        let scratch = self.root.join(format!(
            ".{}.partial",
            dir.file_name().and_then(|n| n.to_str()).unwrap_or("stage")
        ));
        if scratch.exists() {
            fs::remove_dir_all(&scratch)?;
        }
        fs::create_dir_all(&scratch)?;
        log::info!("{stage}: writing {}", dir.display());
        match stage {
            Stage::Generate => self.generate(&scratch)?,
            Stage::Graph => self.graph(&upstream, &scratch)?,
            Stage::Features => self.features(&upstream, &scratch)?,
            Stage::Train => self.train(&upstream, &scratch)?,
            Stage::Select => self.select(&upstream, &scratch)?,
            Stage::Propagate => self.propagate(&upstream, &scratch)?,
            Stage::Evaluate => self.evaluate(&upstream, &scratch)?,
        }
        self.write_manifest(stage, &scratch)?;
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        fs::rename(&scratch, &dir)?;
        Ok(dir)
    }

    /// Runs every stage up to and including `last`, reusing complete ones.
    pub fn run_through(&self, last: Stage) -> Result<PathBuf> {
        let mut dir = PathBuf::new();
        for stage in Stage::ALL.into_iter().filter(|&s| s <= last) {
            dir = self.run(stage, true)?;
        }
        Ok(dir)
    }

    fn write_manifest(&self, stage: Stage, dir: &Path) -> Result<()> {
        let mut files = BTreeMap::new();
        for entry in fs::read_dir(dir)? {
            let entry = entry?;
            let name = entry.file_name().to_string_lossy().into_owned();
            files.insert(name, sha256_hex(&fs::read(entry.path())?));
        }
        let manifest = Manifest {
            stage: stage.name().into(),
            version: stage.version(),
            hash: self.hashes[&stage].clone(),
            upstream: stage
                .upstream()
                .iter()
                .map(|u| (u.name().to_string(), self.hashes[u].clone()))
                .collect(),
            files,
        };
        write_json(&manifest, &dir.join(MANIFEST))
    }

    fn generate(&self, out: &Path) -> Result<()> {
        let data = SourceData::load(&self.cfg.source()?)?;
        data.partition()?;
        save_embeddings(&data.models[0], &out.join("base.cdpe"))?;
        for (i, m) in data.models.iter().enumerate().skip(1) {
            save_embeddings(m, &out.join(format!("committee-{i}.cdpe")))?;
        }
        save_labels(&data.truth, &out.join("labels.csv"))?;
        save_split(&data.split, &out.join("split.csv"))?;
        Ok(())
    }

    fn graph(&self, up: &Dirs, out: &Path) -> Result<()> {
        let data = load_data(&up[&Stage::Generate])?;
        let graphs = GraphSet::build(&data, self.cfg.graph.k)?;
        for (m, (l, u)) in graphs.labeled.iter().zip(&graphs.unlabeled).enumerate() {
            l.save_csv(&out.join(format!("labeled-{m}.csv")))?;
            u.save_csv(&out.join(format!("unlabeled-{m}.csv")))?;
        }
        Ok(())
    }

    fn features(&self, up: &Dirs, out: &Path) -> Result<()> {
        let data = load_data(&up[&Stage::Generate])?;
        let graphs = load_graphs(&up[&Stage::Graph], data.labeled.len())?;
        let features = PairFeatures::compute(&data, &graphs)?;
        log::info!(
            "features: {} training pairs ({:.3} positive), {} candidates",
            features.train.targets.len(),
            features.train.positive_fraction(),
            features.candidates.len()
        );
        features.train.features.save(&out.join("train.cdpf"))?;
        save_targets(&features.train, &out.join("train_targets.csv"))?;
        features.candidates.save(&out.join("candidates.cdpf"))?;
        Ok(())
    }

    fn train(&self, up: &Dirs, out: &Path) -> Result<()> {
        let dir = &up[&Stage::Features];
        let full = FeatureMatrix::load(&dir.join("train.cdpf"))?;
        let n = committee_size(full.dim)?;
        let targets = load_targets(&dir.join("train_targets.csv"), &full.pairs)?;
        let x = self.cfg.mediator.features.project(&full, n)?;
        let (model, log) = train_mediator(&x, &targets, n, &self.cfg.train_config())?;
        if let Some(last) = log.epoch_losses.last() {
            log::info!("train: final loss {last:.5} over {} examples", log.examples);
        }
        save_model(&model, &out.join("model.cdpm"))?;
        write_json(&log, &out.join("train_log.json"))?;
        fs::write(out.join("first_layer.csv"), inspect_first_layer(&model).to_csv())?;
        Ok(())
    }

    fn select(&self, up: &Dirs, out: &Path) -> Result<()> {
        let model = load_model(&up[&Stage::Train].join("model.cdpm"))?;
        let full = FeatureMatrix::load(&up[&Stage::Features].join("candidates.cdpf"))?;
        let n = committee_size(full.dim)?;
        let x = self.cfg.mediator.features.project(&full, n)?;
        let probs = predict(&model, &x)?;
        let selected = select_pairs(&x.pairs, &probs, self.cfg.mediator.threshold)?;
        let data = load_data(&up[&Stage::Generate])?;
        let chosen: Vec<CandidatePair> = selected.iter().map(|e| e.pair).collect();
        let truth = &data.unlabeled_truth;
        let m = pair_metrics(&chosen, truth, truth.ids())?;
        log::info!(
            "select: {} of {} candidates, precision {:.4}, recall {:.4}",
            m.pair_count,
            x.len(),
            m.precision,
            m.recall
        );
        save_selected(&selected, &out.join("selected.csv"))?;
        write_json(&m, &out.join("pair_metrics.json"))
    }

    fn propagate(&self, up: &Dirs, out: &Path) -> Result<()> {
        let split = load_split(&up[&Stage::Generate].join("split.csv"))?;
        let selected = load_selected(&up[&Stage::Select].join("selected.csv"))?;
        let graph = ConsensusGraph::from_selected(split.unlabeled_ids(), &selected)?;
        let cfg = &self.cfg.propagation;
        let hard = propagate(&graph, cfg)?;
        hard.check_invariants(graph.nodes(), cfg.max_size)?;
        log::info!(
            "propagate: {} labels over {} nodes, {} unlabeled",
            hard.num_labels,
            hard.assignments.len(),
            hard.unlabeled_ids.len()
        );
        hard.save(&out.join("assignments.csv"), &out.join("unlabeled.csv"))?;
        let soft = soft_labels(&hard, &graph, self.cfg.soft_labels.depth, self.cfg.soft_labels.decay)?;
        save_embeddings(&soft.to_embedding_set()?, &out.join("soft_labels.cdpe"))?;
        Ok(())
    }

    fn evaluate(&self, up: &Dirs, out: &Path) -> Result<()> {
        let data = load_data(&up[&Stage::Generate])?;
        let graphs = load_graphs(&up[&Stage::Graph], data.labeled.len())?;
        let truth = &data.unlabeled_truth;

        let th = tune_baseline_threshold(
            &data.labeled[0],
            &data.labeled_truth,
            &self.cfg.evaluation.baseline_thresholds,
        )?;
        log::info!("evaluate: clustering baseline threshold {th}");
        let baseline = hierarchical_baseline(&data.unlabeled[0], th)?;
        let mut rows = vec![ReportRow::new("clustering", None, &cluster_metrics(&baseline, truth)?)];

        let votes = vote_select_top(&data, &graphs, data.num_committee(), None)?;
        let voting = settle(votes, truth, &self.cfg.propagation)?;
        rows.push(ReportRow::new("voting", Some(&voting.pairs), &voting.clusters));

        let dir = &up[&Stage::Propagate];
        let selected = load_selected(&up[&Stage::Select].join("selected.csv"))?;
        let assign =
            LabelAssignment::load(&dir.join("assignments.csv"), &dir.join("unlabeled.csv"))?;
        let chosen: Vec<CandidatePair> = selected.iter().map(|e| e.pair).collect();
        let pairs = pair_metrics(&chosen, truth, truth.ids())?;
        rows.push(ReportRow::new("mediator", Some(&pairs), &cluster_metrics(&assign, truth)?));
        for r in &rows {
            log::info!(
                "evaluate: {} pairwise precision {:.4} recall {:.4}",
                r.config,
                r.pairwise_precision,
                r.pairwise_recall
            );
        }
        write_report(&rows, out)
    }
}

type Dirs = BTreeMap<Stage, PathBuf>;

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CdpError::format(path.display().to_string(), e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn committee_size(dim: usize) -> Result<usize> {
    (0..=dim)
        .find(|&n| mediator_input_len(n) == dim)
        .ok_or_else(|| CdpError::format("features", format!("width {dim} fits no committee size")))
}

/// Loads the generate stage's artifacts and partitions them.
pub fn load_data(dir: &Path) -> Result<Partitioned> {
    let mut models = vec![load_embeddings(&dir.join("base.cdpe"))?];
    for i in 1.. {
        let p = dir.join(format!("committee-{i}.cdpe"));
        if !p.is_file() {
            break;
        }
        models.push(load_embeddings(&p)?);
    }
    let truth = load_labels(&dir.join("labels.csv"))?.truth;
    let split = load_split(&dir.join("split.csv"))?;
    Partitioned::new(&models, &truth, &split)
}

pub fn load_graphs(dir: &Path, models: usize) -> Result<GraphSet> {
    let load = |side: &str| {
        (0..models)
            .map(|m| KnnGraph::load_csv(&dir.join(format!("{side}-{m}.csv"))))
            .collect::<Result<Vec<_>>>()
    };
    Ok(GraphSet {
        labeled: load("labeled")?,
        unlabeled: load("unlabeled")?,
    })
}

fn save_targets(set: &TrainingSet, path: &Path) -> Result<()> {
    let mut out = String::from("a,b,target\n");
    for (p, &t) in set.features.pairs.iter().zip(&set.targets) {
        let _ = writeln!(out, "{},{},{}", p.a, p.b, u8::from(t));
    }
    fs::write(path, out)?;
    Ok(())
}

fn load_targets(path: &Path, pairs: &[CandidatePair]) -> Result<Vec<bool>> {
    let mut reader = csv_reader(path, &["a", "b", "target"])?;
    let mut targets = Vec::with_capacity(pairs.len());
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let pair = CandidatePair::new(
            parse_field(path, &record[0], "id")?,
            parse_field(path, &record[1], "id")?,
        )?;
        if pairs.get(i) != Some(&pair) {
            return Err(CdpError::StageMismatch(format!(
                "{} row {} does not match the training features",
                path.display(),
                i + 1
            )));
        }
        let t: u8 = parse_field(path, &record[2], "target")?;
        targets.push(t == 1);
    }
    if targets.len() != pairs.len() {
        return Err(CdpError::DimensionMismatch {
            expected: pairs.len(),
            actual: targets.len(),
        });
    }
    Ok(targets)
}

/// Loads the soft labels written by the propagate stage.
pub fn load_soft_labels(dir: &Path) -> Result<EmbeddingSet> {
    load_embeddings(&dir.join("soft_labels.cdpe"))
}
