//! Evaluation report rows, written as CSV with a JSON mirror.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::io::csv_error;
use crate::evaluation::{ClusterMetrics, PairMetrics};
use crate::{CdpError, Result};

pub const REPORT_HEADER: &str =
    "config,pair_count,pair_recall,pair_precision,pairwise_recall,pairwise_precision";

/// One configuration's scores. Rows that select no pairs (the clustering
/// baseline) leave the pair columns empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub config: String,
    pub pair_count: Option<usize>,
    pub pair_recall: Option<f64>,
    pub pair_precision: Option<f64>,
    pub pairwise_recall: f64,
    pub pairwise_precision: f64,
}

impl ReportRow {
    pub fn new(config: impl Into<String>, pairs: Option<&PairMetrics>, clusters: &ClusterMetrics) -> Self {
        Self {
            config: config.into(),
            pair_count: pairs.map(|p| p.pair_count),
            pair_recall: pairs.map(|p| p.recall),
            pair_precision: pairs.map(|p| p.precision),
            pairwise_recall: clusters.pairwise_recall,
            pairwise_precision: clusters.pairwise_precision,
        }
    }
}

pub fn report_csv(rows: &[ReportRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row)
            .map_err(|e| CdpError::format("report", e.to_string()))?;
    }
    if rows.is_empty() {
        return Ok(format!("{REPORT_HEADER}\n"));
    }
    let bytes = w
        .into_inner()
        .map_err(|e| CdpError::format("report", e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| CdpError::format("report", e.to_string()))
}

/// Writes `report.csv` and `report.json` into `dir`.
pub fn write_report(rows: &[ReportRow], dir: &Path) -> Result<()> {
    fs::write(dir.join("report.csv"), report_csv(rows)?)?;
    let mut json = serde_json::to_string_pretty(rows)
        .map_err(|e| CdpError::format("report", e.to_string()))?;
    json.push('\n');
    fs::write(dir.join("report.json"), json)?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<Vec<ReportRow>> {
    let file = fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CdpError::MissingInput(path.to_path_buf()),
        _ => CdpError::Io(e),
    })?;
    let mut reader = csv::Reader::from_reader(file);
    let header = reader.headers().map_err(|e| csv_error(path, e))?;
    if header.iter().collect::<Vec<_>>().join(",") != REPORT_HEADER {
        return Err(CdpError::format(
            path.display().to_string(),
            format!("expected header {REPORT_HEADER}"),
        ));
    }
    reader
        .deserialize()
        .map(|r| r.map_err(|e| csv_error(path, e)))
        .collect()
}

/// The row named `config`, if present.
pub fn find_row<'a>(rows: &'a [ReportRow], config: &str) -> Option<&'a ReportRow> {
    rows.iter().find(|r| r.config == config)
}
