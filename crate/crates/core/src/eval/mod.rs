//! Benchmark harness: datasets, scoring, latency accounting, sweeps.

mod bench;
mod dataset;
mod metrics;

use std::path::PathBuf;

pub use bench::{
    load_records, run_benchmark, sweep, sweep_csv, BenchOptions, ModelSource, Report, RunRecord,
    ScriptSource, SharedModel, SweepParam, RECORDS_FILE, REPORT_FILE,
};
pub use dataset::{load_dataset, Example};
pub use metrics::{exact_match, normalize_answer, p50, p50_duration};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("no samples")]
    EmptySamples,
    #[error("no run records found in {}", .0.display())]
    NoRecords(PathBuf),
    #[error("{}:{line}: {message}", path.display())]
    Dataset {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("sweep needs at least one value")]
    NoSweepValues,
}
