//! Synthetic identity clusters observed through a base view and `N` perturbed
//! committee views.
//!
//! Identity means are uniform on the unit sphere. Each latent sample is its
//! identity mean plus isotropic Gaussian spread, renormalized. The base view is
//! the latent sample plus (optional) base noise; committee view `i` applies its
//! own random rotation and additive noise to the same latent samples.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{EmbeddingSet, GroundTruth, Partition, Split};
use crate::seed::rng_for;
use crate::{CdpError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SampleCount {
    Fixed(usize),
    Range { min: usize, max: usize },
}

impl SampleCount {
    fn bounds(self) -> (usize, usize) {
        match self {
            SampleCount::Fixed(n) => (n, n),
            SampleCount::Range { min, max } => (min, max),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    /// Total identities, labeled and unlabeled.
    pub num_identities: usize,
    /// Identities reserved for the labeled split. Defaults to one in eleven
    /// (at least two).
    pub labeled_identities: Option<usize>,
    pub samples_per_identity: SampleCount,
    pub dim: usize,
    /// Sub-centers per identity (poses, ages); samples are dealt to them in
    /// turn.
    pub modes_per_identity: usize,
    /// Spread of the sub-centers around the identity mean.
    pub mode_sigma: f64,
    pub intra_class_sigma: f64,
    /// Fraction of samples drawn with `hard_sample_sigma` instead of
    /// `intra_class_sigma`; models low-quality samples that every view
    /// struggles with.
    pub hard_sample_fraction: f64,
    pub hard_sample_sigma: f64,
    /// Per-axis noise on the base view. Zero gives a clean base view.
    pub base_noise_sigma: f64,
    pub num_committee: usize,
    /// Rotation angle (radians) applied in every plane of a random basis.
    pub view_rotation_angle: f64,
    pub view_noise_sigma: f64,
    /// Spread of per-view angle and noise around their nominal values:
    /// view `i` uses `nominal * (1 + h * t_i)` with `t_i` evenly spaced in
    /// `[-1, 1]`. Zero makes the committee homogeneous.
    pub view_heterogeneity: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_identities: 110,
            labeled_identities: None,
            samples_per_identity: SampleCount::Fixed(50),
            dim: 32,
            modes_per_identity: 1,
            mode_sigma: 0.0,
            intra_class_sigma: 0.14,
            hard_sample_fraction: 0.0,
            hard_sample_sigma: 0.4,
            base_noise_sigma: 0.0,
            num_committee: 8,
            view_rotation_angle: 0.5,
            view_noise_sigma: 0.12,
            view_heterogeneity: 0.6,
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_identities < 2 {
            return Err(CdpError::config("num_identities", "must be at least 2"));
        }
        let (min, max) = self.samples_per_identity.bounds();
        if min < 1 || max < min {
            return Err(CdpError::config(
                "samples_per_identity",
                "need 1 <= min <= max",
            ));
        }
        if self.dim < 2 {
            return Err(CdpError::config("dim", "must be at least 2"));
        }
        if self.modes_per_identity < 1 {
            return Err(CdpError::config("modes_per_identity", "must be at least 1"));
        }
        for (field, value) in [
            ("mode_sigma", self.mode_sigma),
            ("intra_class_sigma", self.intra_class_sigma),
            ("hard_sample_sigma", self.hard_sample_sigma),
            ("base_noise_sigma", self.base_noise_sigma),
            ("view_noise_sigma", self.view_noise_sigma),
        ] {
            if !value.is_finite() || value < 0.0 {
                return Err(CdpError::config(field, "must be finite and non-negative"));
            }
        }
        if !(0.0..=1.0).contains(&self.hard_sample_fraction) {
            return Err(CdpError::config("hard_sample_fraction", "must lie in [0, 1]"));
        }
        if !self.view_rotation_angle.is_finite() {
            return Err(CdpError::config("view_rotation_angle", "must be finite"));
        }
        if !(0.0..1.0).contains(&self.view_heterogeneity) {
            return Err(CdpError::config("view_heterogeneity", "must lie in [0, 1)"));
        }
        let labeled = self.num_labeled_identities();
        if labeled < 1 || labeled >= self.num_identities {
            return Err(CdpError::config(
                "labeled_identities",
                "must leave at least one identity on each side",
            ));
        }
        Ok(())
    }

    pub fn num_labeled_identities(&self) -> usize {
        self.labeled_identities
            .unwrap_or_else(|| ((self.num_identities as f64 / 11.0).round() as usize).max(2))
    }

    /// Rotation angle and noise sigma used for committee view `i` (0-based).
    pub fn view_params(&self, i: usize) -> (f64, f64) {
        let t = if self.num_committee <= 1 {
            0.0
        } else {
            2.0 * i as f64 / (self.num_committee - 1) as f64 - 1.0
        };
        let scale = 1.0 + self.view_heterogeneity * t;
        (self.view_rotation_angle * scale, self.view_noise_sigma * scale)
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub base: EmbeddingSet,
    pub committee: Vec<EmbeddingSet>,
    pub truth: GroundTruth,
    pub split: Split,
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let dim = cfg.dim;

    let mut rng = rng_for(cfg.seed, "synthetic/means");
    let means: Vec<Vec<f64>> = (0..cfg.num_identities)
        .map(|_| unit_gaussian(&mut rng, dim))
        .collect();

    let mut rng = rng_for(cfg.seed, "synthetic/modes");
    let centers: Vec<Vec<Vec<f64>>> = means
        .iter()
        .map(|mean| {
            if cfg.modes_per_identity == 1 && cfg.mode_sigma == 0.0 {
                return vec![mean.clone()];
            }
            (0..cfg.modes_per_identity)
                .map(|_| {
                    mean.iter()
                        .map(|m| m + cfg.mode_sigma * rng.sample::<f64, _>(StandardNormal))
                        .collect()
                })
                .collect()
        })
        .collect();

    let (min, max) = cfg.samples_per_identity.bounds();
    let mut rng = rng_for(cfg.seed, "synthetic/sizes");
    let sizes: Vec<usize> = (0..cfg.num_identities)
        .map(|_| rng.random_range(min..=max))
        .collect();

    let mut identity_order: Vec<usize> = (0..cfg.num_identities).collect();
    identity_order.shuffle(&mut rng_for(cfg.seed, "synthetic/split"));
    let mut labeled = vec![false; cfg.num_identities];
    for &identity in &identity_order[..cfg.num_labeled_identities()] {
        labeled[identity] = true;
    }

    let mut rng = rng_for(cfg.seed, "synthetic/samples");
    let mut hard_rng = rng_for(cfg.seed, "synthetic/hard");
    let mut latent: Vec<(usize, Vec<f64>)> = Vec::new();
    for (identity, modes) in centers.iter().enumerate() {
        for j in 0..sizes[identity] {
            let mean = &modes[j % modes.len()];
            let sigma = if cfg.hard_sample_fraction > 0.0
                && hard_rng.random::<f64>() < cfg.hard_sample_fraction
            {
                cfg.hard_sample_sigma
            } else {
                cfg.intra_class_sigma
            };
            let mut x: Vec<f64> = mean
                .iter()
                .map(|m| m + sigma * rng.sample::<f64, _>(StandardNormal))
                .collect();
            normalize(&mut x);
            latent.push((identity, x));
        }
    }
    latent.shuffle(&mut rng_for(cfg.seed, "synthetic/order"));

    let n = latent.len();
    let ids: Vec<u64> = (0..n as u64).collect();
    let truth = GroundTruth::from_pairs(
        latent
            .iter()
            .enumerate()
            .map(|(i, (identity, _))| (i as u64, *identity as u32)),
    )?
    .0;
    let split = Split::new(
        latent
            .iter()
            .enumerate()
            .map(|(i, (identity, _))| {
                let p = if labeled[*identity] {
                    Partition::Labeled
                } else {
                    Partition::Unlabeled
                };
                (i as u64, p)
            })
            .collect(),
    )?;

    let base = render_view(&latent, &ids, dim, None, cfg.base_noise_sigma, cfg.seed, 0)?;
    let committee = (0..cfg.num_committee)
        .map(|i| {
            let (angle, sigma) = cfg.view_params(i);
            let rotation = (angle != 0.0).then(|| {
                random_rotation(
                    dim,
                    angle,
                    &mut rng_for(cfg.seed, &format!("synthetic/view-{}/rotation", i + 1)),
                )
            });
            render_view(&latent, &ids, dim, rotation.as_ref(), sigma, cfg.seed, i + 1)
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(SyntheticDataset {
        base,
        committee,
        truth,
        split,
    })
}

fn render_view(
    latent: &[(usize, Vec<f64>)],
    ids: &[u64],
    dim: usize,
    rotation: Option<&DMatrix<f64>>,
    noise_sigma: f64,
    seed: u64,
    view: usize,
) -> Result<EmbeddingSet> {
    let mut rng = rng_for(seed, &format!("synthetic/view-{view}/noise"));
    let mut values = Vec::with_capacity(latent.len() * dim);
    for (_, x) in latent {
        let mut y = match rotation {
            Some(r) => (0..dim)
                .map(|row| (0..dim).map(|col| r[(row, col)] * x[col]).sum())
                .collect(),
            None => x.clone(),
        };
        if noise_sigma > 0.0 {
            for v in y.iter_mut() {
                *v += noise_sigma * rng.sample::<f64, _>(StandardNormal);
            }
        }
        values.extend(y.iter().map(|&v| v as f32));
    }
    EmbeddingSet::new(ids.to_vec(), values, dim)
}

/// Random rotation of strength `angle`.
///
/// A Haar-random orthonormal basis `Q` comes from the QR decomposition of a
/// Gaussian matrix (columns sign-fixed by `diag(R)`). Consecutive basis pairs
/// span planes in which the returned matrix rotates by `angle`, so
/// `angle = 0` gives the identity and the result is orthogonal for any angle.
pub fn random_rotation<R: Rng>(dim: usize, angle: f64, rng: &mut R) -> DMatrix<f64> {
    let gaussian = DMatrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = gaussian.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..dim {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let mut blocks = DMatrix::<f64>::identity(dim, dim);
    let (s, c) = angle.sin_cos();
    for p in 0..dim / 2 {
        let (a, b) = (2 * p, 2 * p + 1);
        blocks[(a, a)] = c;
        blocks[(b, b)] = c;
        blocks[(a, b)] = -s;
        blocks[(b, a)] = s;
    }
    &q * blocks * q.transpose()
}

fn unit_gaussian<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if normalize(&mut v) {
            return v;
        }
    }
}

fn normalize(v: &mut [f64]) -> bool {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    true
}
