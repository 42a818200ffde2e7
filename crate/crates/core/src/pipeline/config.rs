//! Pipeline configuration, read from TOML.
//!
//! Every section is optional and falls back to its defaults. All randomness
//! flows from the top-level `seed`: the synthetic generator uses it directly
//! (its own stream labels keep sub-streams apart) and every other consumer
//! gets `derive_seed(seed, "stage/<name>")`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{SampleCount, SyntheticConfig};
use crate::features::FeatureSubset;
use crate::knn::DEFAULT_K;
use crate::mediator::{TrainConfig, DEFAULT_THRESHOLD};
use crate::propagation::PropagationConfig;
use crate::seed::derive_seed;
use crate::{CdpError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Output root; the command line may override it.
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub graph: GraphConfig,
    pub mediator: MediatorConfig,
    pub propagation: PropagationConfig,
    pub soft_labels: SoftLabelConfig,
    pub evaluation: EvaluationConfig,
    pub ablation: AblationConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            out_dir: PathBuf::from("out"),
            data: DataConfig::default(),
            graph: GraphConfig::default(),
            mediator: MediatorConfig::default(),
            propagation: benchmark_propagation(),
            soft_labels: SoftLabelConfig::default(),
            evaluation: EvaluationConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

/// Where the embeddings come from. With neither table present the synthetic
/// benchmark is used.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub synthetic: Option<SyntheticConfig>,
    pub files: Option<FileInputs>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileInputs {
    pub base: PathBuf,
    #[serde(default)]
    pub committee: Vec<PathBuf>,
    pub labels: PathBuf,
    pub split: PathBuf,
}

impl FileInputs {
    pub fn all_paths(&self) -> Vec<&Path> {
        let mut out = vec![self.base.as_path()];
        out.extend(self.committee.iter().map(PathBuf::as_path));
        out.push(&self.labels);
        out.push(&self.split);
        out
    }

    /// Resolves relative paths against `dir`.
    pub fn rebased(&self, dir: &Path) -> FileInputs {
        let fix = |p: &PathBuf| if p.is_absolute() { p.clone() } else { dir.join(p) };
        FileInputs {
            base: fix(&self.base),
            committee: self.committee.iter().map(fix).collect(),
            labels: fix(&self.labels),
            split: fix(&self.split),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic(SyntheticConfig),
    Files(FileInputs),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphConfig {
    pub k: usize,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self { k: DEFAULT_K }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MediatorConfig {
    pub threshold: f64,
    pub features: FeatureSubset,
    pub train: TrainConfig,
}

impl Default for MediatorConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            features: FeatureSubset::Full,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SoftLabelConfig {
    pub depth: usize,
    pub decay: f64,
}

impl Default for SoftLabelConfig {
    fn default() -> Self {
        Self {
            depth: 1,
            decay: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    /// Candidate thresholds for the clustering baseline, tuned on the
    /// labeled split.
    pub baseline_thresholds: Vec<f64>,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            baseline_thresholds: (0..20).map(|i| i as f64 / 20.0).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// Committee sizes for the voting rows.
    pub committee_counts: Vec<usize>,
    pub feature_subsets: Vec<FeatureSubset>,
    pub k_values: Vec<usize>,
    /// Add homogeneous-vs-heterogeneous committee rows (synthetic data only).
    pub heterogeneity: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            committee_counts: vec![0, 2, 4, 6, 8],
            feature_subsets: vec![
                FeatureSubset::Relationship,
                FeatureSubset::RelationshipAffinity,
                FeatureSubset::Full,
            ],
            k_values: vec![10, 20, 30, 40],
            heterogeneity: true,
        }
    }
}

/// The default synthetic benchmark: 110 identities of 50 samples, 10 of them
/// labeled, observed by a noisy base view and 8 heterogeneous committee views.
pub fn benchmark_synthetic() -> SyntheticConfig {
    SyntheticConfig {
        num_identities: 110,
        labeled_identities: Some(10),
        samples_per_identity: SampleCount::Fixed(50),
        dim: 32,
        modes_per_identity: 1,
        mode_sigma: 0.0,
        intra_class_sigma: 0.10,
        hard_sample_fraction: 0.1,
        hard_sample_sigma: 0.35,
        base_noise_sigma: 0.06,
        num_committee: 8,
        view_rotation_angle: 0.5,
        view_noise_sigma: 0.06,
        view_heterogeneity: 0.6,
        seed: 7,
    }
}

/// Propagation settings of the benchmark; the size cap sits a little above
/// the identity size.
pub fn benchmark_propagation() -> PropagationConfig {
    PropagationConfig {
        max_size: 60,
        ..PropagationConfig::default()
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CdpError::InvalidConfig {
            field: e
                .span()
                .map(|s| format!("byte {}..{}", s.start, s.end))
                .unwrap_or_else(|| "config".into()),
            reason: e.message().to_string(),
        })
    }

    /// Reads and validates a config file. Relative input paths are resolved
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => CdpError::MissingInput(path.to_path_buf()),
            _ => CdpError::Io(e),
        })?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(files) = &cfg.data.files {
            let dir = path.parent().unwrap_or(Path::new("."));
            cfg.data.files = Some(files.rebased(dir));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn source(&self) -> Result<DataSource> {
        match (&self.data.synthetic, &self.data.files) {
            (Some(_), Some(_)) => Err(CdpError::config(
                "data",
                "give either [data.synthetic] or [data.files], not both",
            )),
            (None, Some(f)) => Ok(DataSource::Files(f.clone())),
            (s, None) => {
                let mut s = s.clone().unwrap_or_else(benchmark_synthetic);
                s.seed = self.seed;
                Ok(DataSource::Synthetic(s))
            }
        }
    }

    /// Training settings with the seed derived from the global one.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(self.seed, "stage/train"),
            ..self.mediator.train.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let committee = match self.source()? {
            DataSource::Synthetic(s) => {
                s.validate()?;
                s.num_committee
            }
            DataSource::Files(f) => {
                for p in f.all_paths() {
                    if !p.is_file() {
                        return Err(CdpError::MissingInput(p.to_path_buf()));
                    }
                }
                f.committee.len()
            }
        };
        if self.graph.k == 0 {
            return Err(CdpError::config("graph.k", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.mediator.threshold) {
            return Err(CdpError::config("mediator.threshold", "must lie in [0, 1]"));
        }
        self.mediator.train.validate()?;
        self.propagation.validate()?;
        if !(self.soft_labels.decay > 0.0 && self.soft_labels.decay <= 1.0) {
            return Err(CdpError::config("soft_labels.decay", "must lie in (0, 1]"));
        }
        let grid = &self.evaluation.baseline_thresholds;
        if grid.is_empty() || grid.iter().any(|t| !(-1.0..=1.0).contains(t)) {
            return Err(CdpError::config(
                "evaluation.baseline_thresholds",
                "need at least one value, all in [-1, 1]",
            ));
        }
        let ab = &self.ablation;
        if let Some(n) = ab.committee_counts.iter().find(|&&n| n > committee) {
            return Err(CdpError::config(
                "ablation.committee_counts",
                format!("{n} exceeds the committee size {committee}"),
            ));
        }
        if ab.k_values.contains(&0) {
            return Err(CdpError::config("ablation.k_values", "k must be at least 1"));
        }
        Ok(())
    }
}
