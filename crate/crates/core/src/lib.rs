//! Consensus-driven pseudo-labeling over k-NN graphs.
//!
//! Given one base embedding set and `N` committee embedding sets describing the
//! same samples, the pipeline builds cosine k-NN graphs, scores every candidate
//! pair from the base graph with a small MLP (the mediator) fed by committee
//! consensus features, and turns the selected pairs into pseudo-labels by
//! recursively splitting connected components.
//!
//! Module map:
//!
//! - [`dataset`]: embedding/label containers, file formats and the synthetic
//!   committee generator.
//! - [`knn`]: brute-force cosine k-NN graphs and candidate pairs.
//! - [`features`]: relationship / affinity / neighbor-distribution features.
//! - [`mediator`]: the pair classifier, threshold selection and committee voting.
//! - [`propagation`]: component-splitting label propagation and soft labels.
//! - [`evaluation`]: pair and pairwise cluster metrics, clustering baseline.
//! - [`pipeline`]: config, staged artifacts and ablation sweeps.

pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod knn;
pub mod mediator;
pub mod pipeline;
pub mod propagation;
pub mod seed;

pub use error::{CdpError, Result};
