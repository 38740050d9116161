//! Monte Carlo harness: scenario runs, metrics, CSV ingestion and reports.

pub mod ingest;
pub mod metrics;
pub mod report;
pub mod scenario;

pub use ingest::{
    ingest_subjects, join_events, read_counting_csv, read_events_csv, read_subjects_csv,
    write_events_csv, write_subjects_csv, CountingTable, IngestError,
};
pub use metrics::compute_metrics;
pub use report::{load_scenario_config, metrics_tsv, parse_scenario_config, replicate_csv, METRICS_COLUMNS};
pub use scenario::{
    aggregate, calibrate_beta0, run_replicate, run_scenario, run_scenario_with, scenario_specs,
    scenario_suite, Benchmark, Calibration, ReplicateRecord, ScenarioOutcome, ScenarioSpec,
    SuiteReport, SuiteTable,
};

use thiserror::Error;

use crate::cohort::CohortError;
use crate::cox::CoxError;
use crate::simulate::SimError;
use crate::types::ConfigError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("no estimates to summarise")]
    NoEstimates,
    #[error("true hazard ratio must be positive, got {0}")]
    InvalidTruth(f64),
    #[error("estimate and interval counts differ")]
    LengthMismatch,
    #[error("non-positive hazard ratio estimate {0}")]
    NonPositiveEstimate(f64),
    #[error("replicate count must be at least 1")]
    NoReplicates,
    #[error("{method}: {failures} of {replicates} replicates failed (first error: {first})")]
    TooManyFailures {
        method: &'static str,
        failures: usize,
        replicates: usize,
        first: String,
    },
    #[error("calibration failed: {0}")]
    Calibration(String),
    #[error("could not start worker pool: {0}")]
    Workers(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Simulation(#[from] SimError),
    #[error(transparent)]
    Cohort(#[from] CohortError),
    #[error(transparent)]
    Fit(#[from] CoxError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
}
