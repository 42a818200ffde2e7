//! The mediator: a small MLP that turns committee consensus features into the
//! probability that a candidate pair shares an identity, plus the naive
//! committee-voting baseline.
//!
//! Architecture is fixed at `input -> 50 -> 50 -> 2` with ReLU hidden layers,
//! a 2-way softmax output and cross-entropy loss. Class 1 is "same identity".
//! All arithmetic is `f64`; training is single-threaded mini-batch SGD so a
//! seed fully determines the weights.

mod inspect;
mod io;
mod select;

pub use inspect::{inspect_first_layer, BlockWeight, FirstLayerReport};
pub use io::{load_model, save_model, MODEL_MAGIC, MODEL_VERSION};
pub use select::{
    load_selected, save_selected, select_pairs, vote_select, vote_select_all, SelectedEdge,
    DEFAULT_THRESHOLD,
};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{EmbeddingSet, GroundTruth};
use crate::features::{compute_features, FeatureMatrix};
use crate::knn::{build_knn_graph, candidate_pairs, KnnGraph};
use crate::seed::rng_for;
use crate::{CdpError, Result};

pub const HIDDEN_WIDTH: usize = 50;

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `outputs x inputs`.
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Layer {
    fn xavier<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        Self {
            inputs,
            outputs,
            weights: (0..inputs * outputs)
                .map(|_| rng.random_range(-limit..limit))
                .collect(),
            biases: vec![0.0; outputs],
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            inputs: self.inputs,
            outputs: self.outputs,
            weights: vec![0.0; self.weights.len()],
            biases: vec![0.0; self.biases.len()],
        }
    }

    fn forward(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.weights.chunks_exact(self.inputs).zip(&self.biases).map(|(w, b)| {
            b + w.iter().zip(x).map(|(w, x)| w * x).sum::<f64>()
        }));
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MediatorModel {
    /// Committee size `N` the model was trained for.
    pub num_committee: usize,
    /// Per-feature standardization `(x - shift) * scale`, fitted on the
    /// training features. Identity when standardization is off.
    pub input_shift: Vec<f64>,
    pub input_scale: Vec<f64>,
    pub layers: Vec<Layer>,
}

impl MediatorModel {
    /// Untrained model with Xavier-uniform weights and zero biases.
    pub fn init(num_committee: usize, input_dim: usize, seed: u64) -> Self {
        let mut rng = rng_for(seed, "mediator/init");
        let dims = [input_dim, HIDDEN_WIDTH, HIDDEN_WIDTH, 2];
        let layers = dims
            .windows(2)
            .map(|w| Layer::xavier(w[0], w[1], &mut rng))
            .collect();
        Self {
            num_committee,
            input_shift: vec![0.0; input_dim],
            input_scale: vec![1.0; input_dim],
            layers,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim()];
        dims.extend(self.layers.iter().map(|l| l.outputs));
        dims
    }

    pub fn num_parameters(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }

    /// Weights then biases, layer by layer.
    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_parameters());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.biases);
        }
        out
    }

    pub fn set_parameters(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.num_parameters());
        let mut rest = params;
        for l in &mut self.layers {
            let (w, r) = rest.split_at(l.weights.len());
            l.weights.copy_from_slice(w);
            let (b, r) = r.split_at(l.biases.len());
            l.biases.copy_from_slice(b);
            rest = r;
        }
    }

    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.input_shift)
            .zip(&self.input_scale)
            .map(|((x, s), c)| (x - s) * c)
            .collect()
    }

    /// Output logits and the cached activations needed for backprop.
    fn forward_cached(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = vec![self.standardize(x)];
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut out = Vec::with_capacity(layer.outputs);
            layer.forward(acts.last().unwrap(), &mut out);
            if i < last {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            acts.push(out);
        }
        acts
    }

    /// `[p(negative), p(positive)]`.
    pub fn forward(&self, x: &[f64]) -> Result<[f64; 2]> {
        if x.len() != self.input_dim() {
            return Err(CdpError::DimensionMismatch {
                expected: self.input_dim(),
                actual: x.len(),
            });
        }
        let acts = self.forward_cached(x);
        let logits = acts.last().unwrap();
        Ok(softmax2(logits[0], logits[1]))
    }

    /// Mean cross-entropy over a batch and its gradient (flattened like
    /// [`parameters`](Self::parameters)).
    pub fn loss_and_gradient(&self, xs: &[Vec<f64>], ys: &[bool]) -> (f64, Vec<f64>) {
        let mut grads: Vec<Layer> = self.layers.iter().map(Layer::zeros_like).collect();
        let scale = 1.0 / xs.len() as f64;
        let mut loss = 0.0;
        for (x, &y) in xs.iter().zip(ys) {
            let acts = self.forward_cached(x);
            let logits = acts.last().unwrap();
            let target = usize::from(y);
            loss += cross_entropy(logits, target);
            let p = softmax2(logits[0], logits[1]);
            let mut delta: Vec<f64> = (0..2)
                .map(|c| (p[c] - if c == target { 1.0 } else { 0.0 }) * scale)
                .collect();
            for li in (0..self.layers.len()).rev() {
                let layer = &self.layers[li];
                let input = &acts[li];
                let g = &mut grads[li];
                for (o, &d) in delta.iter().enumerate() {
                    g.biases[o] += d;
                    let row = &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    row.iter_mut().zip(input).for_each(|(gw, x)| *gw += d * x);
                }
                if li == 0 {
                    break;
                }
                let mut next = vec![0.0; layer.inputs];
                for (o, &d) in delta.iter().enumerate() {
                    let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    next.iter_mut().zip(row).for_each(|(n, w)| *n += d * w);
                }
                // ReLU derivative, evaluated on the post-activation value
                next.iter_mut()
                    .zip(input)
                    .for_each(|(n, &a)| if a <= 0.0 { *n = 0.0 });
                delta = next;
            }
        }
        let mut flat = Vec::with_capacity(self.num_parameters());
        for g in grads {
            flat.extend(g.weights);
            flat.extend(g.biases);
        }
        (loss * scale, flat)
    }

    pub fn mean_loss(&self, xs: &[Vec<f64>], ys: &[bool]) -> f64 {
        xs.iter()
            .zip(ys)
            .map(|(x, &y)| cross_entropy(self.forward_cached(x).last().unwrap(), usize::from(y)))
            .sum::<f64>()
            / xs.len() as f64
    }
}

fn softmax2(a: f64, b: f64) -> [f64; 2] {
    let m = a.max(b);
    let (ea, eb) = ((a - m).exp(), (b - m).exp());
    let s = ea + eb;
    [ea / s, eb / s]
}

fn cross_entropy(logits: &[f64], target: usize) -> f64 {
    let m = logits[0].max(logits[1]);
    let lse = m + ((logits[0] - m).exp() + (logits[1] - m).exp()).ln();
    lse - logits[target]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Learning rate is multiplied by `lr_decay` once this many epochs finish.
    pub decay_after_epoch: usize,
    pub lr_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Fit per-feature standardization on the training data.
    pub standardize: bool,
    /// Keep at most this many negatives per positive (seeded subsample).
    pub negative_ratio: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            epochs: 4,
            decay_after_epoch: 3,
            lr_decay: 0.1,
            batch_size: 16,
            seed: 0,
            standardize: true,
            negative_ratio: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(CdpError::config("learning_rate", "must be positive"));
        }
        if self.epochs == 0 {
            return Err(CdpError::config("epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(CdpError::config("batch_size", "must be at least 1"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay.is_finite()) {
            return Err(CdpError::config("lr_decay", "must be positive"));
        }
        if let Some(r) = self.negative_ratio {
            if !(r > 0.0 && r.is_finite()) {
                return Err(CdpError::config("negative_ratio", "must be positive"));
            }
        }
        Ok(())
    }
}

/// Full-data training loss measured after each epoch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epoch_losses: Vec<f64>,
    pub examples: usize,
    pub positives: usize,
}

/// Candidate pairs of a labeled split with their same-identity targets.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub features: FeatureMatrix,
    pub targets: Vec<bool>,
}

impl TrainingSet {
    pub fn positive_fraction(&self) -> f64 {
        self.targets.iter().filter(|&&t| t).count() as f64 / self.targets.len().max(1) as f64
    }
}

/// Builds the k-NN graphs of the labeled split and labels every base-graph
/// pair by ground truth. `labeled_sets` holds the base model first.
pub fn build_training_pairs(
    labeled_sets: &[EmbeddingSet],
    truth: &GroundTruth,
    k: usize,
) -> Result<TrainingSet> {
    let graphs = labeled_sets
        .iter()
        .map(|s| build_knn_graph(s, k))
        .collect::<Result<Vec<_>>>()?;
    training_pairs_from_graphs(&graphs, labeled_sets, truth)
}

pub fn training_pairs_from_graphs(
    graphs: &[KnnGraph],
    sets: &[EmbeddingSet],
    truth: &GroundTruth,
) -> Result<TrainingSet> {
    let base = graphs
        .first()
        .ok_or_else(|| CdpError::Validation("no base graph".into()))?;
    let mut identities = std::collections::BTreeSet::new();
    for &id in base.node_ids() {
        identities.insert(truth.label_of(id)?);
    }
    if identities.len() < 2 {
        return Err(CdpError::Validation(
            "labeled split must contain at least two identities".into(),
        ));
    }
    let pairs = candidate_pairs(base);
    let targets = pairs
        .iter()
        .map(|p| Ok(truth.label_of(p.a)? == truth.label_of(p.b)?))
        .collect::<Result<Vec<_>>>()?;
    let features = compute_features(&pairs, graphs, sets)?;
    Ok(TrainingSet { features, targets })
}

pub fn train_mediator(
    features: &FeatureMatrix,
    targets: &[bool],
    num_committee: usize,
    cfg: &TrainConfig,
) -> Result<(MediatorModel, TrainLog)> {
    cfg.validate()?;
    if features.len() != targets.len() {
        return Err(CdpError::DimensionMismatch {
            expected: features.len(),
            actual: targets.len(),
        });
    }
    let positives = targets.iter().filter(|&&t| t).count();
    if positives == 0 || positives == targets.len() {
        return Err(CdpError::Validation(
            "mediator training needs both positive and negative pairs".into(),
        ));
    }

    let mut index: Vec<usize> = (0..targets.len()).collect();
    if let Some(ratio) = cfg.negative_ratio {
        let keep = ((positives as f64) * ratio).ceil() as usize;
        let mut negatives: Vec<usize> = index.iter().copied().filter(|&i| !targets[i]).collect();
        if keep < negatives.len() {
            negatives.shuffle(&mut rng_for(cfg.seed, "mediator/downsample"));
            negatives.truncate(keep.max(1));
            negatives.sort_unstable();
            index = (0..targets.len())
                .filter(|&i| targets[i] || negatives.binary_search(&i).is_ok())
                .collect();
        }
    }
    let xs: Vec<Vec<f64>> = index
        .iter()
        .map(|&i| features.row(i).iter().map(|&v| f64::from(v)).collect())
        .collect();
    let ys: Vec<bool> = index.iter().map(|&i| targets[i]).collect();

    let mut model = MediatorModel::init(num_committee, features.dim, cfg.seed);
    if cfg.standardize {
        let (shift, scale) = fit_standardization(&xs, features.dim);
        model.input_shift = shift;
        model.input_scale = scale;
    }

    let mut rng = rng_for(cfg.seed, "mediator/shuffle");
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let mut log = TrainLog {
        examples: xs.len(),
        positives: ys.iter().filter(|&&y| y).count(),
        ..Default::default()
    };
    let mut params = model.parameters();
    for epoch in 0..cfg.epochs {
        let lr = if epoch >= cfg.decay_after_epoch {
            cfg.learning_rate * cfg.lr_decay
        } else {
            cfg.learning_rate
        };
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let bx: Vec<Vec<f64>> = batch.iter().map(|&i| xs[i].clone()).collect();
            let by: Vec<bool> = batch.iter().map(|&i| ys[i]).collect();
            let (_, grad) = model.loss_and_gradient(&bx, &by);
            params.iter_mut().zip(&grad).for_each(|(p, g)| *p -= lr * g);
            model.set_parameters(&params);
        }
        let loss = model.mean_loss(&xs, &ys);
        log::debug!("mediator epoch {} lr {lr} loss {loss:.6}", epoch + 1);
        log.epoch_losses.push(loss);
    }
    if model.parameters().iter().any(|p| !p.is_finite()) {
        return Err(CdpError::Invariant("mediator weights diverged".into()));
    }
    Ok((model, log))
}

fn fit_standardization(xs: &[Vec<f64>], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let n = xs.len() as f64;
    let mut mean = vec![0.0; dim];
    for x in xs {
        mean.iter_mut().zip(x).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; dim];
    for x in xs {
        var.iter_mut()
            .zip(x.iter().zip(&mean))
            .for_each(|(s, (v, m))| *s += (v - m) * (v - m));
    }
    let scale = var
        .iter()
        .map(|s| {
            let sd = (s / n).sqrt();
            if sd > 1e-12 {
                1.0 / sd
            } else {
                1.0
            }
        })
        .collect();
    (mean, scale)
}

/// Positive-class probability for every feature row.
pub fn predict(model: &MediatorModel, features: &FeatureMatrix) -> Result<Vec<f64>> {
    if features.dim != model.input_dim() {
        return Err(CdpError::DimensionMismatch {
            expected: model.input_dim(),
            actual: features.dim,
        });
    }
    features
        .values
        .par_chunks_exact(features.dim)
        .map(|row| {
            let x: Vec<f64> = row.iter().map(|&v| f64::from(v)).collect();
            model.forward(&x).map(|p| p[1])
        })
        .collect()
}
