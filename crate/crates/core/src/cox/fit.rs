use nalgebra::DMatrix;

use super::data::{CoxData, Evaluation};
use super::{CoxError, FitOptions, DIVERGENCE_BOUND};
use crate::types::{CountingRow, FitResult};

const MAX_HALVINGS: usize = 20;
/// Largest coordinate step still compatible with a converged fit.
const STEP_TOLERANCE: f64 = 1e-2;

/// Partial log-likelihood, gradient and Hessian for a set of rows.
pub fn partial_loglik(
    rows: &[CountingRow],
    beta: &[f64],
    offsets: Option<&[f64]>,
) -> Result<Evaluation, CoxError> {
    CoxData::new(rows)?.evaluate(beta, offsets, true)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NewtonOutcome {
    pub beta: Vec<f64>,
    pub evaluation: Evaluation,
    pub iterations: usize,
    pub converged: bool,
}

fn negative_hessian(eval: &Evaluation, p: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(p, p, &eval.hessian).map(|v| -v)
}

/// Inverse of the observed information at `eval`.
pub(crate) fn information_inverse(eval: &Evaluation, p: usize) -> Result<DMatrix<f64>, CoxError> {
    let info = negative_hessian(eval, p);
    let inv = info
        .cholesky()
        .ok_or(CoxError::NumericalFailure("information matrix is not positive definite"))?
        .inverse();
    Ok((&inv + inv.transpose()) * 0.5)
}

fn check_identifiable(data: &CoxData, eval: &Evaluation) -> Result<(), CoxError> {
    let p = data.n_covariates();
    for j in 0..p {
        let info = -eval.hessian[j * p + j];
        let scale: f64 = (0..data.n_rows()).map(|i| data.row(i)[j].powi(2)).sum::<f64>() + 1.0;
        if !(info > 1e-10 * scale.sqrt()) {
            return Err(CoxError::NotIdentifiable(j));
        }
    }
    Ok(())
}

/// Newton-Raphson with step halving on the partial likelihood.
pub(crate) fn newton(
    data: &CoxData,
    offsets: Option<&[f64]>,
    start: &[f64],
    options: &FitOptions,
) -> Result<NewtonOutcome, CoxError> {
    let p = data.n_covariates();
    let mut beta = start.to_vec();
    let mut eval = data.evaluate(&beta, offsets, true)?;
    let tol = options.convergence_tolerance;
    for iteration in 1..=options.max_iterations {
        let info = negative_hessian(&eval, p);
        let step = match info.cholesky() {
            Some(chol) => chol.solve(&DMatrix::from_column_slice(p, 1, &eval.gradient)),
            None => {
                // information that vanished after leaving the start point
                // means the likelihood keeps rising towards infinity
                if iteration > 1 && check_identifiable(data, &eval).is_err() {
                    if let Some((index, value)) = largest(&beta) {
                        return Err(CoxError::MonotoneLikelihood { index, value });
                    }
                }
                check_identifiable(data, &eval)?;
                return Err(CoxError::NumericalFailure("singular information matrix"));
            }
        };
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let candidate: Vec<f64> = beta
                .iter()
                .zip(step.iter())
                .map(|(b, s)| b + scale * s)
                .collect();
            let trial = data.evaluate(&candidate, offsets, true)?;
            if trial.loglik.is_finite() && trial.loglik >= eval.loglik - 1e-12 * eval.loglik.abs() {
                accepted = Some((candidate, trial));
                break;
            }
            scale *= 0.5;
        }
        let Some((candidate, trial)) = accepted else {
            // no ascent direction left: already at the numerical optimum
            return Ok(NewtonOutcome {
                beta,
                evaluation: eval,
                iterations: iteration,
                converged: true,
            });
        };
        if let Some((index, value)) = largest(&candidate) {
            if value.abs() > DIVERGENCE_BOUND {
                return Err(CoxError::MonotoneLikelihood { index, value });
            }
        }
        let change = (trial.loglik - eval.loglik).abs() / (eval.loglik.abs() + tol);
        let max_step = step.iter().map(|s| (scale * s).abs()).fold(0.0, f64::max);
        beta = candidate;
        eval = trial;
        if change < tol && max_step < STEP_TOLERANCE {
            return Ok(NewtonOutcome {
                beta,
                evaluation: eval,
                iterations: iteration,
                converged: true,
            });
        }
    }
    Ok(NewtonOutcome {
        beta,
        evaluation: eval,
        iterations: options.max_iterations,
        converged: false,
    })
}

fn largest(beta: &[f64]) -> Option<(usize, f64)> {
    beta.iter()
        .copied()
        .enumerate()
        .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
}

pub(crate) fn default_names(p: usize) -> Vec<String> {
    (1..=p).map(|j| format!("beta{j}")).collect()
}

/// Fits a (possibly stratified) Cox model on prepared data from `beta = 0`.
pub fn fit_cox_data(
    data: &CoxData,
    offsets: Option<&[f64]>,
    options: &FitOptions,
) -> Result<FitResult, CoxError> {
    options.validate()?;
    let p = data.n_covariates();
    let start = vec![0.0; p];
    let initial = data.evaluate(&start, offsets, true)?;
    check_identifiable(data, &initial)?;
    let outcome = newton(data, offsets, &start, options)?;
    if !outcome.converged {
        return Err(CoxError::NotConverged(outcome.iterations));
    }
    let model_variance = information_inverse(&outcome.evaluation, p)?;
    Ok(FitResult {
        names: default_names(p),
        coefficients: outcome.beta,
        model_variance,
        robust_variance: None,
        theta: None,
        log_likelihood: outcome.evaluation.loglik,
        iterations: outcome.iterations,
        converged: true,
    })
}

pub fn fit_cox(rows: &[CountingRow], options: &FitOptions) -> Result<FitResult, CoxError> {
    fit_cox_data(&CoxData::new(rows)?, None, options)
}
