//! Configuration, staged artifacts and ablation sweeps.

pub mod ablation;
pub mod config;
pub mod engine;
pub mod report;
pub mod stages;

pub use ablation::{compare_committee, heterogeneity_pair, run_ablation, CommitteeComparison};
pub use config::{benchmark_propagation, benchmark_synthetic, DataSource, PipelineConfig};
pub use report::{find_row, read_report, write_report, ReportRow, REPORT_HEADER};
pub use stages::{Stage, Workspace};
