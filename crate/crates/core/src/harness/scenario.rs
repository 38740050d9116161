//! Monte Carlo scenario runner and the built-in scenario tables.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::compute_metrics;
use super::HarnessError;
use crate::cohort::{build_counting_rows, match_cohort, AnalysisCohort, RowOptions};
use crate::cox::{estimate_perr_ag, estimate_perr_cf, FitOptions, VarianceKind};
use crate::rng::{replicate_rng, StreamPurpose};
use crate::simulate::{simulate_cohort, SimError};
use crate::types::{Dependence, PerrEstimate, ScenarioConfig, SimMetrics};

/// Covariate used for 1:1 matching in simulated cohorts.
pub const SIMULATION_MATCH_KEY: &str = "z";

/// Largest tolerated share of failed fits per method.
pub const MAX_FAILURE_SHARE: f64 = 0.10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub replicate: u64,
    pub n_matched: usize,
    pub n_events: usize,
    pub ag: Option<PerrEstimate>,
    pub ag_error: Option<String>,
    pub cf: Option<PerrEstimate>,
    pub cf_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioOutcome {
    pub config: ScenarioConfig,
    pub ag: SimMetrics,
    pub cf: SimMetrics,
    pub records: Vec<ReplicateRecord>,
    pub ag_failures: usize,
    pub cf_failures: usize,
}

/// Matched analysis cohorts (unstratified and event-stratified) for one replicate.
pub fn replicate_cohorts(
    config: &ScenarioConfig,
    replicate: u64,
) -> Result<(AnalysisCohort, AnalysisCohort), HarnessError> {
    let subjects = simulate_cohort(config, replicate)?;
    let mut rng = replicate_rng(config.master_seed, replicate, StreamPurpose::Matching);
    let matched = match_cohort(&subjects, &[SIMULATION_MATCH_KEY], &mut rng)?;
    let base = RowOptions {
        window: config.restriction_window,
        stratify: false,
        pooling_percentile: config.pooling_percentile,
        pooling_basis: config.pooling_basis,
        reset_strata_at_index: false,
    };
    let ag = build_counting_rows(&subjects, &matched.pairs, &base)?;
    let cf = build_counting_rows(
        &subjects,
        &matched.pairs,
        &RowOptions {
            stratify: true,
            ..base
        },
    )?;
    Ok((ag, cf))
}

/// Simulate, match, expand and fit both estimators for one replicate.
/// Fit failures and explosive simulations are recorded as failed
/// replicates; other errors are returned.
pub fn run_replicate(
    config: &ScenarioConfig,
    replicate: u64,
    options: &FitOptions,
) -> Result<ReplicateRecord, HarnessError> {
    let (ag_cohort, cf_cohort) = match replicate_cohorts(config, replicate) {
        Ok(cohorts) => cohorts,
        Err(HarnessError::Simulation(e @ SimError::Runaway(_))) => {
            let message = e.to_string();
            return Ok(ReplicateRecord {
                replicate,
                n_matched: 0,
                n_events: 0,
                ag: None,
                ag_error: Some(message.clone()),
                cf: None,
                cf_error: Some(message),
            });
        }
        Err(e) => return Err(e),
    };
    let (ag, ag_error) = match estimate_perr_ag(&ag_cohort.rows, VarianceKind::Robust, options) {
        Ok((est, _)) => (Some(est), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let (cf, cf_error) = match estimate_perr_cf(&cf_cohort.rows, options) {
        Ok((est, _)) => (Some(est), None),
        Err(e) => (None, Some(e.to_string())),
    };
    Ok(ReplicateRecord {
        replicate,
        n_matched: ag_cohort.n_subjects(),
        n_events: ag_cohort.n_events(),
        ag,
        ag_error,
        cf,
        cf_error,
    })
}

fn method_metrics(
    records: &[ReplicateRecord],
    pick: impl Fn(&ReplicateRecord) -> Option<&PerrEstimate>,
    true_hr: f64,
) -> Result<SimMetrics, HarnessError> {
    let used: Vec<&PerrEstimate> = records.iter().filter_map(&pick).collect();
    let hrs: Vec<f64> = used.iter().map(|e| e.perr_hr).collect();
    let cis: Vec<(f64, f64)> = used.iter().map(|e| (e.ci_low, e.ci_high)).collect();
    let mut metrics = compute_metrics(&hrs, &cis, true_hr)?;
    // cohort size over replicates that produced a cohort
    let simulated: Vec<&ReplicateRecord> = records.iter().filter(|r| r.n_matched > 0).collect();
    let n = simulated.len() as f64;
    metrics.mean_n = simulated.iter().map(|r| r.n_matched as f64).sum::<f64>() / n;
    metrics.mean_events = simulated.iter().map(|r| r.n_events as f64).sum::<f64>() / n;
    Ok(metrics)
}

/// AG and CF metrics over converged replicates, in record order.
pub fn aggregate(records: &[ReplicateRecord], true_hr: f64) -> Result<(SimMetrics, SimMetrics), HarnessError> {
    Ok((
        method_metrics(records, |r| r.ag.as_ref(), true_hr)?,
        method_metrics(records, |r| r.cf.as_ref(), true_hr)?,
    ))
}

/// Runs every replicate of a scenario on `workers` threads. Output does
/// not depend on `workers`.
pub fn run_scenario(config: &ScenarioConfig, workers: usize) -> Result<ScenarioOutcome, HarnessError> {
    run_scenario_with(config, workers, &FitOptions::default())
}

pub fn run_scenario_with(
    config: &ScenarioConfig,
    workers: usize,
    options: &FitOptions,
) -> Result<ScenarioOutcome, HarnessError> {
    config.validate()?;
    if config.replicates == 0 {
        return Err(HarnessError::NoReplicates);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| HarnessError::Workers(e.to_string()))?;
    let results: Vec<Result<ReplicateRecord, HarnessError>> = pool.install(|| {
        (0..config.replicates as u64)
            .into_par_iter()
            .map(|r| run_replicate(config, r, options))
            .collect()
    });
    let records = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let ag_failures = records.iter().filter(|r| r.ag.is_none()).count();
    let cf_failures = records.iter().filter(|r| r.cf.is_none()).count();
    let limit = (MAX_FAILURE_SHARE * records.len() as f64).floor() as usize;
    for (method, failures) in [("PERR_AG", ag_failures), ("PERR_CF", cf_failures)] {
        if failures > limit {
            let first = records
                .iter()
                .find_map(|r| if method == "PERR_AG" { r.ag_error.clone() } else { r.cf_error.clone() })
                .unwrap_or_default();
            return Err(HarnessError::TooManyFailures {
                method,
                failures,
                replicates: records.len(),
                first,
            });
        }
    }
    if ag_failures + cf_failures > 0 {
        log::warn!(
            "{}: excluded {ag_failures} AG and {cf_failures} CF non-converged replicates",
            config.name
        );
    }
    let (ag, cf) = aggregate(&records, config.true_hr())?;
    Ok(ScenarioOutcome {
        config: config.clone(),
        ag,
        cf,
        records,
        ag_failures,
        cf_failures,
    })
}

/// Which built-in table of scenarios to run; they differ in the Weibull shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SuiteTable {
    Main,
    S1,
    S2,
}

impl SuiteTable {
    pub fn shape(self) -> f64 {
        match self {
            SuiteTable::Main => 0.8,
            SuiteTable::S1 => 1.2,
            SuiteTable::S2 => 1.0,
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "main" => Some(SuiteTable::Main),
            "s1" => Some(SuiteTable::S1),
            "s2" => Some(SuiteTable::S2),
            _ => None,
        }
    }
}

/// Published-style performance figures a scenario is expected to reproduce.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Benchmark {
    pub mean_n: f64,
    pub mean_events: f64,
    /// (R.Bias %, RMSE, CP %)
    pub ag: (f64, f64, f64),
    pub cf: (f64, f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScenarioSpec {
    pub dependence: Dependence,
    pub hr: f64,
    /// Outcome intercept calibrated so the matched cohort's mean event
    /// count is close to `benchmark.mean_events` (see [`calibrate_beta0`]).
    pub beta0: f64,
    pub benchmark: Benchmark,
}

impl ScenarioSpec {
    pub fn label(&self) -> String {
        let parameter = match self.dependence {
            Dependence::None => String::new(),
            Dependence::Constant(z) => format!("; zeta = {z:.1}"),
            Dependence::Transient(p) | Dependence::TransientLast(p) => format!("; psi = {p:.1}"),
        };
        format!("{}; HR = {:.1}{}", self.dependence.label(), self.hr, parameter)
    }

    pub fn config(&self, table: SuiteTable, replicates: usize, master_seed: u64) -> ScenarioConfig {
        ScenarioConfig {
            name: self.label(),
            k: table.shape(),
            beta0: self.beta0,
            log_hr: self.hr.ln(),
            dependence: self.dependence,
            replicates,
            master_seed,
            ..ScenarioConfig::default()
        }
    }
}

const fn spec(
    dependence: Dependence,
    hr: f64,
    beta0: f64,
    mean_n: f64,
    mean_events: f64,
    ag: (f64, f64, f64),
    cf: (f64, f64, f64),
) -> ScenarioSpec {
    ScenarioSpec {
        dependence,
        hr,
        beta0,
        benchmark: Benchmark {
            mean_n,
            mean_events,
            ag,
            cf,
        },
    }
}

use Dependence::{Constant as C, None as N, Transient as T, TransientLast as TL};

// beta0 values come from `calibrate_beta0` with 50 replicates, seed 20240601
// and target = mean_events; `perr calibrate-beta0 --table <t>` regenerates
// them. Positive transient rows use the last-event kernel because the
// summed kernel is explosive at every intercept that reaches the target.
const MAIN: [ScenarioSpec; 10] = [
    spec(C(-1.0), 0.5, 0.4980, 326.0, 691.0, (19.5, 0.224, 80.6), (6.1, 0.188, 92.8)),
    spec(C(-1.0), 2.0, 0.4951, 326.0, 920.0, (-18.9, 0.254, 63.2), (-3.2, 0.170, 91.8)),
    spec(T(-1.0), 0.5, 0.3319, 326.0, 573.0, (25.6, 0.269, 69.2), (12.6, 0.217, 88.8)),
    spec(T(-1.0), 2.0, 0.2689, 326.0, 719.0, (-26.2, 0.342, 41.0), (-10.9, 0.216, 86.6)),
    spec(C(1.0), 0.5, -1.5412, 326.0, 414.0, (-19.7, 0.567, 86.0), (-3.5, 0.325, 91.0)),
    spec(C(1.0), 2.0, -1.7693, 326.0, 1026.0, (95.5, 0.715, 64.2), (-5.7, 0.250, 93.6)),
    spec(TL(1.0), 0.5, -1.0752, 326.0, 487.0, (-8.0, 0.503, 91.4), (3.3, 0.307, 89.6)),
    spec(TL(1.0), 2.0, -1.1985, 328.0, 773.0, (23.6, 0.431, 93.4), (-2.0, 0.257, 91.8)),
    spec(N, 0.5, -0.4994, 326.0, 542.0, (2.8, 0.213, 94.4), (9.2, 0.218, 92.0)),
    spec(N, 2.0, -0.5027, 326.0, 872.0, (2.5, 0.206, 93.4), (-10.5, 0.249, 78.6)),
];

const S1: [ScenarioSpec; 10] = [
    spec(C(-1.0), 0.5, 0.2993, 328.0, 719.0, (22.9, 0.245, 73.4), (7.9, 0.203, 90.8)),
    spec(C(-1.0), 2.0, 0.3053, 326.0, 994.0, (-19.8, 0.267, 62.8), (-1.9, 0.185, 90.4)),
    spec(T(-1.0), 0.5, 0.2232, 328.0, 618.0, (29.5, 0.290, 61.8), (16.6, 0.233, 83.8)),
    spec(T(-1.0), 2.0, 0.1935, 326.0, 795.0, (-28.2, 0.370, 32.0), (-12.5, 0.241, 80.8)),
    spec(C(1.0), 0.5, -1.7583, 326.0, 578.0, (-24.6, 0.774, 78.6), (-7.1, 0.394, 83.8)),
    spec(C(1.0), 2.0, -1.9613, 326.0, 2191.0, (196.4, 1.084, 20.2), (3.3, 0.312, 86.0)),
    spec(TL(1.0), 0.5, -1.3615, 326.0, 500.0, (-7.1, 0.580, 89.0), (13.9, 0.320, 89.0)),
    spec(TL(1.0), 2.0, -1.4117, 328.0, 908.0, (28.7, 0.490, 91.2), (-9.1, 0.271, 90.6)),
    spec(N, 0.5, -0.7148, 324.0, 578.0, (2.6, 0.238, 93.8), (12.2, 0.238, 90.0)),
    spec(N, 2.0, -0.6873, 326.0, 1004.0, (3.6, 0.238, 92.2), (-11.7, 0.283, 76.2)),
];

const S2: [ScenarioSpec; 10] = [
    spec(C(-1.0), 0.5, 0.3938, 326.0, 702.0, (21.8, 0.241, 75.4), (8.6, 0.212, 89.0)),
    spec(C(-1.0), 2.0, 0.3942, 328.0, 966.0, (-20.0, 0.269, 58.6), (-2.9, 0.172, 93.8)),
    spec(T(-1.0), 0.5, 0.2327, 326.0, 591.0, (30.7, 0.298, 62.0), (18.1, 0.234, 85.4)),
    spec(T(-1.0), 2.0, 0.2237, 326.0, 757.0, (-27.8, 0.363, 31.6), (-12.6, 0.234, 82.6)),
    spec(C(1.0), 0.5, -1.6479, 328.0, 501.0, (-24.8, 0.692, 77.6), (-7.8, 0.370, 87.8)),
    spec(C(1.0), 2.0, -1.7967, 326.0, 1834.0, (188.4, 1.062, 44.4), (10.7, 0.324, 86.2)),
    spec(TL(1.0), 0.5, -1.1483, 328.0, 531.0, (-7.3, 0.553, 91.4), (9.4, 0.326, 86.8)),
    spec(TL(1.0), 2.0, -1.2105, 326.0, 940.0, (29.3, 0.495, 91.4), (-9.6, 0.270, 88.4)),
    spec(N, 0.5, -0.6109, 328.0, 563.0, (4.3, 0.208, 95.8), (12.9, 0.225, 91.4)),
    spec(N, 2.0, -0.5905, 328.0, 942.0, (4.9, 0.211, 93.0), (-9.3, 0.250, 80.8)),
];

/// The ten scenario rows of a table, in display order.
pub fn scenario_specs(table: SuiteTable) -> &'static [ScenarioSpec; 10] {
    match table {
        SuiteTable::Main => &MAIN,
        SuiteTable::S1 => &S1,
        SuiteTable::S2 => &S2,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub table: SuiteTable,
    pub rows: Vec<(ScenarioSpec, ScenarioOutcome)>,
}

/// Runs all ten rows of a table.
pub fn scenario_suite(
    table: SuiteTable,
    replicates: usize,
    master_seed: u64,
    workers: usize,
) -> Result<SuiteReport, HarnessError> {
    if replicates == 0 {
        return Err(HarnessError::NoReplicates);
    }
    let mut rows = Vec::with_capacity(10);
    for spec in scenario_specs(table) {
        let config = spec.config(table, replicates, master_seed);
        log::info!("running {}", config.name);
        rows.push((*spec, run_scenario(&config, workers)?));
    }
    Ok(SuiteReport { table, rows })
}

/// Mean matched-cohort event count and size over `replicates` replicates,
/// without fitting. Explosive replicates are skipped; if more than
/// [`MAX_FAILURE_SHARE`] explode the event count is reported as infinite.
pub fn mean_matched_events(config: &ScenarioConfig, replicates: usize) -> Result<(f64, f64), HarnessError> {
    let mut events = 0.0;
    let mut n = 0.0;
    let mut used = 0usize;
    for r in 0..replicates as u64 {
        match replicate_cohorts(config, r) {
            Ok((cohort, _)) => {
                events += cohort.n_events() as f64;
                n += cohort.n_subjects() as f64;
                used += 1;
            }
            Err(HarnessError::Simulation(SimError::Runaway(_))) => {}
            Err(e) => return Err(e),
        }
    }
    if (replicates - used) as f64 > MAX_FAILURE_SHARE * replicates as f64 || used == 0 {
        return Ok((f64::INFINITY, n / used.max(1) as f64));
    }
    Ok((events / used as f64, n / used as f64))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    pub beta0: f64,
    pub mean_events: f64,
    pub mean_n: f64,
}

/// Finds the outcome intercept whose matched cohorts average `target_events`
/// events, by an upward scan in steps of 0.25 followed by bisection.
pub fn calibrate_beta0(
    template: &ScenarioConfig,
    target_events: f64,
    replicates: usize,
) -> Result<Calibration, HarnessError> {
    if !(target_events > 0.0) || replicates == 0 {
        return Err(HarnessError::Calibration("target and replicates must be positive".into()));
    }
    let at = |beta0: f64| {
        let config = ScenarioConfig {
            beta0,
            ..template.clone()
        };
        mean_matched_events(&config, replicates)
    };
    let mut lo = -5.0;
    let (lo_events, _) = at(lo)?;
    if lo_events > target_events {
        return Err(HarnessError::Calibration(format!(
            "even beta0 = {lo} gives {lo_events:.1} events"
        )));
    }
    let mut hi = lo;
    loop {
        hi += 0.25;
        if hi > 5.0 {
            return Err(HarnessError::Calibration("no beta0 up to 5 reaches the target".into()));
        }
        let (events, _) = at(hi)?;
        if events >= target_events {
            break;
        }
        lo = hi;
    }
    for _ in 0..20 {
        let mid = 0.5 * (lo + hi);
        let (events, _) = at(mid)?;
        if events < target_events {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-4 {
            break;
        }
    }
    let beta0 = 0.5 * (lo + hi);
    let (mean_events, mean_n) = at(beta0)?;
    Ok(Calibration {
        beta0,
        mean_events,
        mean_n,
    })
}
