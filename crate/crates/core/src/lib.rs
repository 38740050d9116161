//! Prior event rate ratio (PERR) estimation for recurrent events.
//!
//! The crate covers the whole pipeline: simulation of confounded cohorts with
//! event dependence, risk-set matching and counting-process expansion, a
//! Cox engine with strata, sandwich variance and shared gamma frailty, the
//! dynamic random-intercept diagnostic, and a Monte Carlo harness.

pub mod cohort;
pub mod cox;
pub mod drim;
pub mod harness;
pub mod rng;
pub mod simulate;
pub mod types;

pub use types::{
    validate_subject, CountingRow, Dependence, DrimResult, FitResult, PerrEstimate, PerrMethod,
    ScenarioConfig, SimMetrics, SubjectRecord, ValidationError,
};
