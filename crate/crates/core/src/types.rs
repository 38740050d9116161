//! Shared data model: subjects, counting-process rows, fitted models and
//! simulation summaries.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ValidationError {
    #[error("subject {id}: end_time must be positive and finite (got {end_time})")]
    NonPositiveEnd { id: String, end_time: f64 },
    #[error("subject {id}: entry_time {entry} must be finite and before end_time {end}")]
    BadEntry { id: String, entry: f64, end: f64 },
    #[error("subject {id}: unsorted events (event_times[{index}] = {time} does not exceed its predecessor)")]
    UnsortedEvents { id: String, index: usize, time: f64 },
    #[error("subject {id}: event_times[{index}] = {time} lies outside ({entry}, {end}]")]
    EventOutOfRange {
        id: String,
        index: usize,
        time: f64,
        entry: f64,
        end: f64,
    },
    #[error("subject {id}: treatment at/after censoring (treatment_time {treatment} >= end_time {end})")]
    TreatmentAfterEnd { id: String, treatment: f64, end: f64 },
    #[error("subject {id}: treatment_time {treatment} must exceed entry_time {entry}")]
    TreatmentBeforeEntry { id: String, treatment: f64, entry: f64 },
}

/// One person's follow-up.
///
/// Covariates are kept as their textual codes so that categorical values
/// match exactly and records survive a CSV round trip unchanged; use
/// [`SubjectRecord::real`] for numeric access.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub id: String,
    pub entry_time: f64,
    pub end_time: f64,
    pub treatment_time: Option<f64>,
    pub event_times: Vec<f64>,
    pub covariates: BTreeMap<String, String>,
}

impl SubjectRecord {
    pub fn new(id: impl Into<String>, end_time: f64) -> Self {
        Self {
            id: id.into(),
            entry_time: 0.0,
            end_time,
            treatment_time: None,
            event_times: Vec::new(),
            covariates: BTreeMap::new(),
        }
    }

    pub fn with_treatment(mut self, time: f64) -> Self {
        self.treatment_time = Some(time);
        self
    }

    pub fn with_events(mut self, events: Vec<f64>) -> Self {
        self.event_times = events;
        self
    }

    pub fn with_covariate(mut self, name: impl Into<String>, value: impl ToString) -> Self {
        self.covariates.insert(name.into(), value.to_string());
        self
    }

    pub fn is_treated(&self) -> bool {
        self.treatment_time.is_some()
    }

    pub fn real(&self, name: &str) -> Option<f64> {
        self.covariates.get(name)?.trim().parse().ok()
    }

    /// Number of events in `(from, to]`.
    pub fn events_in(&self, from: f64, to: f64) -> usize {
        self.event_times
            .iter()
            .filter(|&&t| t > from && t <= to)
            .count()
    }
}

/// Checks every [`SubjectRecord`] invariant and hands the record back.
pub fn validate_subject(record: SubjectRecord) -> Result<SubjectRecord, ValidationError> {
    let id = &record.id;
    let end = record.end_time;
    if !(end.is_finite() && end > 0.0) {
        return Err(ValidationError::NonPositiveEnd {
            id: id.clone(),
            end_time: end,
        });
    }
    let entry = record.entry_time;
    if !(entry.is_finite() && entry < end) {
        return Err(ValidationError::BadEntry {
            id: id.clone(),
            entry,
            end,
        });
    }
    let mut previous = f64::NEG_INFINITY;
    for (index, &time) in record.event_times.iter().enumerate() {
        if !(time > previous) {
            return Err(ValidationError::UnsortedEvents {
                id: id.clone(),
                index,
                time,
            });
        }
        if !(time > entry && time <= end) {
            return Err(ValidationError::EventOutOfRange {
                id: id.clone(),
                index,
                time,
                entry,
                end,
            });
        }
        previous = time;
    }
    if let Some(treatment) = record.treatment_time {
        if !(treatment < end) {
            return Err(ValidationError::TreatmentAfterEnd {
                id: id.clone(),
                treatment,
                end,
            });
        }
        if !(treatment > entry) {
            return Err(ValidationError::TreatmentBeforeEntry {
                id: id.clone(),
                treatment,
                entry,
            });
        }
    }
    Ok(record)
}

/// One counting-process interval `(start, stop]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountingRow {
    pub subject_id: usize,
    pub cluster_id: usize,
    /// 0 means unstratified.
    pub stratum_id: u32,
    pub start: f64,
    pub stop: f64,
    pub status: bool,
    pub covariates: Vec<f64>,
}

/// Event dependence in the outcome intensity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", content = "value", rename_all = "lowercase")]
pub enum Dependence {
    #[default]
    None,
    /// Log-rate shift `zeta * ln(N(t-) + 1)`.
    Constant(f64),
    /// Each prior event adds `psi * exp(-0.5 * elapsed)` to the log rate.
    Transient(f64),
    /// Only the most recent event acts: `psi * exp(-0.5 * (t - t_last))`.
    /// Bounded by `psi`, so it stays non-explosive for positive `psi`.
    #[serde(rename = "transient_last")]
    TransientLast(f64),
}

impl Dependence {
    pub fn label(&self) -> &'static str {
        match self {
            Dependence::None => "None",
            Dependence::Constant(z) if *z < 0.0 => "Negative, constant",
            Dependence::Constant(_) => "Positive, constant",
            Dependence::Transient(p) | Dependence::TransientLast(p) if *p < 0.0 => {
                "Negative, transient"
            }
            Dependence::Transient(_) | Dependence::TransientLast(_) => "Positive, transient",
        }
    }

    pub fn sign(&self) -> f64 {
        match self {
            Dependence::None => 0.0,
            Dependence::Constant(v) | Dependence::Transient(v) | Dependence::TransientLast(v) => {
                v.signum()
            }
        }
    }
}

/// Which distribution the pooling percentile is taken over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolingBasis {
    /// Analysed event counts, one value per person.
    Persons,
    /// Event sequence numbers, one value per analysed event.
    #[default]
    Events,
}

/// All parameters of one simulation scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub name: String,
    pub n_pre_match: usize,
    /// Weibull shape of the outcome intensity.
    pub k: f64,
    /// Intercept of the treatment-uptake hazard.
    pub c0: f64,
    /// Intercept of the outcome intensity.
    pub beta0: f64,
    /// ln of the true treatment hazard ratio.
    pub log_hr: f64,
    pub dependence: Dependence,
    pub sigma_omega_sq: f64,
    pub u_variance: f64,
    pub tau_range: (f64, f64),
    pub replicates: usize,
    pub master_seed: u64,
    pub pooling_percentile: f64,
    pub pooling_basis: PoolingBasis,
    pub restriction_window: Option<f64>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            name: String::from("custom"),
            n_pre_match: 600,
            k: 0.8,
            c0: -2.0,
            beta0: -1.0,
            log_hr: 2.0f64.ln(),
            dependence: Dependence::None,
            sigma_omega_sq: 0.5,
            u_variance: 0.1,
            tau_range: (1.0, 3.0),
            replicates: 500,
            master_seed: 20240601,
            pooling_percentile: 0.95,
            pooling_basis: PoolingBasis::Events,
            restriction_window: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("invalid scenario config: {0}")]
    Invalid(String),
}

impl ScenarioConfig {
    pub fn true_hr(&self) -> f64 {
        self.log_hr.exp()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |msg: &str| Err(ConfigError::Invalid(msg.to_string()));
        if self.n_pre_match == 0 {
            return bad("n_pre_match must be positive");
        }
        if !(self.k > 0.0 && self.k.is_finite()) {
            return bad("k must be positive");
        }
        if !(self.sigma_omega_sq >= 0.0) || !(self.u_variance >= 0.0) {
            return bad("variances must be nonnegative");
        }
        let (a, b) = self.tau_range;
        if !(a > 0.0 && a < b && b.is_finite()) {
            return bad("tau_range must satisfy 0 < a < b");
        }
        if !(self.pooling_percentile > 0.0 && self.pooling_percentile <= 1.0) {
            return bad("pooling_percentile must lie in (0, 1]");
        }
        if let Some(w) = self.restriction_window {
            if !(w > 0.0) {
                return bad("restriction_window must be positive");
            }
        }
        if !(self.beta0.is_finite() && self.log_hr.is_finite() && self.c0.is_finite()) {
            return bad("beta0, log_hr and c0 must be finite");
        }
        Ok(())
    }
}

/// Output of one Cox-type model fit. Baseline hazards are profiled out.
#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub names: Vec<String>,
    pub coefficients: Vec<f64>,
    pub model_variance: DMatrix<f64>,
    pub robust_variance: Option<DMatrix<f64>>,
    /// Frailty variance; present only for frailty fits.
    pub theta: Option<f64>,
    pub log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl FitResult {
    pub fn coefficient(&self, name: &str) -> Option<f64> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(self.coefficients[i])
    }

    pub fn model_se(&self, index: usize) -> f64 {
        self.model_variance[(index, index)].max(0.0).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PerrMethod {
    #[serde(rename = "AG")]
    AndersenGill,
    #[serde(rename = "CF")]
    ConditionalFrailty,
}

impl std::fmt::Display for PerrMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PerrMethod::AndersenGill => write!(f, "PERR_AG"),
            PerrMethod::ConditionalFrailty => write!(f, "PERR_CF"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerrEstimate {
    pub hr_prior: f64,
    pub hr_post: f64,
    pub perr_hr: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub p_value: f64,
    pub se_log: f64,
    pub method: PerrMethod,
    pub theta: Option<f64>,
}

impl PerrEstimate {
    pub fn covers(&self, hr: f64) -> bool {
        self.ci_low <= hr && hr <= self.ci_high
    }
}

/// Aggregate performance over simulation replicates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimMetrics {
    pub r_bias_pct: f64,
    pub rmse: f64,
    pub cp_pct: f64,
    pub mean_hr: f64,
    pub mean_n: f64,
    pub mean_events: f64,
    pub replicates_used: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrimResult {
    pub lag_coefficient: f64,
    pub lag_se: f64,
    pub odds_ratio: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub p_value: f64,
    pub intercept: f64,
    pub covariate_coefficients: Vec<f64>,
    pub sigma_b: f64,
    pub log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
}
