//! Text outputs (metrics TSV, per-replicate CSV) and scenario config files.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use super::scenario::{ReplicateRecord, ScenarioOutcome};
use super::HarnessError;
use crate::types::{ConfigError, PerrEstimate, ScenarioConfig};

pub const METRICS_COLUMNS: [&str; 9] = [
    "scenario",
    "mean_n",
    "mean_events",
    "ag_rbias",
    "ag_rmse",
    "ag_cp",
    "cf_rbias",
    "cf_rmse",
    "cf_cp",
];

/// One line per scenario; R.Bias and CP to one decimal, RMSE to three.
pub fn metrics_tsv<'a>(outcomes: impl IntoIterator<Item = &'a ScenarioOutcome>) -> String {
    let mut out = METRICS_COLUMNS.join("\t");
    out.push('\n');
    for o in outcomes {
        let _ = writeln!(
            out,
            "{}\t{:.0}\t{:.0}\t{:.1}\t{:.3}\t{:.1}\t{:.1}\t{:.3}\t{:.1}",
            o.config.name.replace('\t', " "),
            o.ag.mean_n,
            o.ag.mean_events,
            o.ag.r_bias_pct,
            o.ag.rmse,
            o.ag.cp_pct,
            o.cf.r_bias_pct,
            o.cf.rmse,
            o.cf.cp_pct,
        );
    }
    out
}

fn estimate_cells(estimate: Option<&PerrEstimate>) -> [String; 4] {
    match estimate {
        Some(e) => [
            e.perr_hr.to_string(),
            e.ci_low.to_string(),
            e.ci_high.to_string(),
            "true".into(),
        ],
        None => [String::new(), String::new(), String::new(), "false".into()],
    }
}

/// Per-replicate HRs, confidence limits and convergence flags.
pub fn replicate_csv<W: Write>(records: &[ReplicateRecord], output: W) -> Result<(), csv::Error> {
    let mut wtr = csv::Writer::from_writer(output);
    wtr.write_record([
        "replicate",
        "n_matched",
        "n_events",
        "ag_hr",
        "ag_ci_low",
        "ag_ci_high",
        "ag_converged",
        "cf_hr",
        "cf_ci_low",
        "cf_ci_high",
        "cf_converged",
        "cf_theta",
    ])?;
    for r in records {
        let mut row = vec![
            r.replicate.to_string(),
            r.n_matched.to_string(),
            r.n_events.to_string(),
        ];
        row.extend(estimate_cells(r.ag.as_ref()));
        row.extend(estimate_cells(r.cf.as_ref()));
        row.push(
            r.cf
                .as_ref()
                .and_then(|e| e.theta)
                .map(|t| t.to_string())
                .unwrap_or_default(),
        );
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Parses a TOML scenario file. Missing keys take their defaults and
/// unknown keys are rejected.
pub fn parse_scenario_config(text: &str) -> Result<ScenarioConfig, ConfigError> {
    let config: ScenarioConfig =
        toml::from_str(text).map_err(|e| ConfigError::Invalid(e.message().to_string()))?;
    config.validate()?;
    Ok(config)
}

pub fn load_scenario_config(path: &Path) -> Result<ScenarioConfig, HarnessError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::Invalid(format!("{}: {e}", path.display())))?;
    Ok(parse_scenario_config(&text)?)
}
