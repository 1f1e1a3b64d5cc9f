//! Multi-seed sweeps: configuration, resumable execution, aggregation over
//! seeds and report emission.

pub mod aggregate;
pub mod config;
pub mod report;
pub mod runner;

pub use aggregate::{aggregate, aggregate_dir, AggregateSummary, SummaryRow};
pub use config::{CellKey, ExperimentConfig, SnapshotSelection};
pub use report::{emit_report, ReportFormat};
pub use runner::{
    analyze_cell, spatial_cell, EvalSet, Manifest, PerInputRecord, RunOptions, RunSummary, Runner,
    Stages,
};
