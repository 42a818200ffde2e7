//! Turning pair scores into consensus-graph edges.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::io::{csv_error, csv_reader, parse_field};
use crate::knn::{CandidatePair, KnnGraph};
use crate::{CdpError, Result};

/// Probability threshold for keeping a mediator-scored pair.
pub const DEFAULT_THRESHOLD: f64 = 0.96;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectedEdge {
    pub pair: CandidatePair,
    pub weight: f64,
}

/// Keeps every candidate whose probability is at least `threshold`.
pub fn select_pairs(
    candidates: &[CandidatePair],
    probabilities: &[f64],
    threshold: f64,
) -> Result<Vec<SelectedEdge>> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(CdpError::config("threshold", "must lie in [0, 1]"));
    }
    if candidates.len() != probabilities.len() {
        return Err(CdpError::DimensionMismatch {
            expected: candidates.len(),
            actual: probabilities.len(),
        });
    }
    Ok(candidates
        .iter()
        .zip(probabilities)
        .filter(|(_, &p)| p >= threshold)
        .map(|(&pair, &weight)| SelectedEdge { pair, weight })
        .collect())
}

/// Naive committee vote: a member votes for the pair when the pair is an edge
/// of its symmetrized k-NN graph. Selected edges weigh `votes / N`.
pub fn vote_select(
    pair: CandidatePair,
    committee: &[KnnGraph],
    quorum: usize,
) -> Result<Option<SelectedEdge>> {
    check_quorum(committee.len(), quorum)?;
    let mut votes = 0;
    for g in committee {
        if g.has_edge(pair.a, pair.b)? {
            votes += 1;
        }
    }
    Ok((votes >= quorum).then(|| SelectedEdge {
        pair,
        weight: votes as f64 / committee.len() as f64,
    }))
}

pub fn vote_select_all(
    candidates: &[CandidatePair],
    committee: &[KnnGraph],
    quorum: usize,
) -> Result<Vec<SelectedEdge>> {
    check_quorum(committee.len(), quorum)?;
    let picked = candidates
        .par_iter()
        .map(|&p| vote_select(p, committee, quorum))
        .collect::<Result<Vec<_>>>()?;
    Ok(picked.into_iter().flatten().collect())
}

fn check_quorum(members: usize, quorum: usize) -> Result<()> {
    if quorum == 0 || quorum > members {
        return Err(CdpError::config(
            "quorum",
            format!("must lie in [1, {members}], got {quorum}"),
        ));
    }
    Ok(())
}

/// Writes `a,b,weight` rows. Weights use the shortest exact decimal form, so
/// a reload reproduces them bit for bit.
pub fn save_selected(edges: &[SelectedEdge], path: &Path) -> Result<()> {
    let mut out = String::from("a,b,weight\n");
    for e in edges {
        let _ = writeln!(out, "{},{},{}", e.pair.a, e.pair.b, e.weight);
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_selected(path: &Path) -> Result<Vec<SelectedEdge>> {
    let mut reader = csv_reader(path, &["a", "b", "weight"])?;
    let mut edges = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let a = parse_field(path, &record[0], "id")?;
        let b = parse_field(path, &record[1], "id")?;
        let weight = parse_field(path, &record[2], "weight")?;
        edges.push(SelectedEdge {
            pair: CandidatePair::new(a, b)?,
            weight,
        });
    }
    Ok(edges)
}
