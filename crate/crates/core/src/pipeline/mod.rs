//! On-disk workflow: synthetic data, ingestion, graph building, training
//! runs, explanations and reports. Each step reads and writes plain files so
//! it can be run on its own.

mod adapt;
mod config;
mod explain;
mod generate;
mod graphs;
mod manifest;
mod report;
mod train;

pub use adapt::run_adapt;
pub use config::{DatasetConfig, PathsConfig, RunConfig, TrainMode};
pub use explain::{run_explain, CamRecord, ExplainReport, EXPLAIN_FILE};
pub use generate::{class_params, generate_synthetic, render_sample, ClassParams};
pub use graphs::{
    build_graph_dataset, graph_for_sample, GraphBuildReport, GraphFailure, FAILURES_FILE, GRAPH_DIR,
};
pub use manifest::{
    ingest_dataset, verify_files, DatasetManifest, GeneratorEcho, SampleRecord, Split, SplitCounts,
    MANIFEST_FILE, MANIFEST_VERSION,
};
pub use report::{
    build_report, report_csv, write_report, BranchScores, Delta, ModeMeans, Report, ReportRow, REPORT_CSV, REPORT_JSON,
};
pub use train::{
    features_csv, load_dataset, seed_dir_name, stratified_split, train_run, train_sweep, LoadedDataset, MeanStd,
    RunMetrics, SeedResult, SplitSizes, SweepSummary, CNN_CHECKPOINT, CONFIG_FILE, FEATURES_FILE, GCN_CHECKPOINT,
    HISTORY_FILE, METRICS_FILE, RUN_FILES, SUMMARY_FILE,
};
