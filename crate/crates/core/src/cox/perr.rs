use nalgebra::DMatrix;
use statrs::function::erf::erfc;

use super::data::CoxData;
use super::fit::fit_cox_data;
use super::frailty::{fit_gamma_frailty_data, FrailtyFit};
use super::robust::sandwich;
use super::{CoxError, FitOptions};
use crate::cohort::PERR_COVARIATES;
use crate::types::{CountingRow, FitResult, PerrEstimate, PerrMethod};

const Z_975: f64 = 1.96;

/// Which variance backs the PERR_AG interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum VarianceKind {
    #[default]
    Robust,
    Model,
}

/// PERR summary from coefficients ordered `[trt, post, trt_x_post, ...]`.
pub fn perr_from_fit(
    fit: &FitResult,
    variance: &DMatrix<f64>,
    method: PerrMethod,
) -> Result<PerrEstimate, CoxError> {
    if fit.coefficients.len() < 3 {
        return Err(CoxError::DimensionMismatch {
            expected: 3,
            found: fit.coefficients.len(),
        });
    }
    let b1 = fit.coefficients[0];
    let b3 = fit.coefficients[2];
    let se = variance[(2, 2)].max(0.0).sqrt();
    let z = b3 / se;
    let p_value = if se > 0.0 {
        erfc(z.abs() / std::f64::consts::SQRT_2).clamp(0.0, 1.0)
    } else {
        f64::NAN
    };
    Ok(PerrEstimate {
        hr_prior: b1.exp(),
        hr_post: (b1 + b3).exp(),
        perr_hr: b3.exp(),
        ci_low: (b3 - Z_975 * se).exp(),
        ci_high: (b3 + Z_975 * se).exp(),
        p_value,
        se_log: se,
        method,
        theta: fit.theta,
    })
}

fn named(mut fit: FitResult) -> FitResult {
    for (name, label) in fit.names.iter_mut().zip(PERR_COVARIATES) {
        *name = label.to_string();
    }
    fit
}

/// Andersen-Gill PERR: one baseline hazard, interval from the clustered
/// sandwich by default.
pub fn estimate_perr_ag(
    rows: &[CountingRow],
    variance: VarianceKind,
    options: &FitOptions,
) -> Result<(PerrEstimate, FitResult), CoxError> {
    let unstratified: Vec<CountingRow> = rows
        .iter()
        .map(|r| CountingRow {
            stratum_id: 0,
            ..r.clone()
        })
        .collect();
    let data = CoxData::new(&unstratified)?;
    let mut fit = named(fit_cox_data(&data, None, options)?);
    let robust = sandwich(&data, &fit.coefficients, None, &fit.model_variance)?;
    fit.robust_variance = Some(robust);
    let matrix = match variance {
        VarianceKind::Robust => fit.robust_variance.as_ref().expect("set above"),
        VarianceKind::Model => &fit.model_variance,
    };
    let estimate = perr_from_fit(&fit, matrix, PerrMethod::AndersenGill)?;
    Ok((estimate, fit))
}

/// Conditional-frailty PERR: event-number strata plus a shared gamma frailty;
/// interval from the fixed-theta observed information.
pub fn estimate_perr_cf(
    rows: &[CountingRow],
    options: &FitOptions,
) -> Result<(PerrEstimate, FrailtyFit), CoxError> {
    let data = CoxData::new(rows)?;
    let mut frailty = fit_gamma_frailty_data(&data, options)?;
    frailty.fit = named(frailty.fit);
    let estimate = perr_from_fit(
        &frailty.fit,
        &frailty.fit.model_variance,
        PerrMethod::ConditionalFrailty,
    )?;
    Ok((estimate, frailty))
}
