//! Counting-process Cox engine: Breslow partial likelihood with strata,
//! Newton fitting, clustered sandwich variance, shared gamma frailty and
//! the two PERR estimators built on top of them.

mod data;
mod fit;
#[cfg(test)]
mod fixtures;
mod frailty;
mod perr;
mod robust;

pub use data::{CoxData, Evaluation, RiskSets};
pub use fit::{fit_cox, fit_cox_data, partial_loglik, NewtonOutcome};
pub use frailty::{
    fit_gamma_frailty, fit_gamma_frailty_data, frailty_posterior, marginal_loglik, ProfilePoint,
    FrailtyFit, FrailtyState, ThetaBoundary,
};
pub use perr::{estimate_perr_ag, estimate_perr_cf, perr_from_fit, VarianceKind};
pub use robust::{robust_variance, score_residuals};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CoxError {
    #[error("no rows supplied")]
    Empty,
    #[error("no events in any stratum")]
    NoEvents,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("row {row}: interval ({start}, {stop}] is empty or not finite")]
    BadInterval { row: usize, start: f64, stop: f64 },
    #[error("non-finite covariate value")]
    NonFinite,
    #[error("covariate {0} is constant within every risk set; coefficient not identifiable")]
    NotIdentifiable(usize),
    #[error("monotone likelihood: coefficient {index} diverged to {value}")]
    MonotoneLikelihood { index: usize, value: f64 },
    #[error("no convergence after {0} iterations")]
    NotConverged(usize),
    #[error("frailty EM did not converge at theta = {theta} after {iterations} iterations")]
    EmNotConverged { theta: f64, iterations: usize },
    #[error("robust variance needs at least two clusters (got {0})")]
    TooFewClusters(usize),
    #[error("numerical failure: {0}")]
    NumericalFailure(&'static str),
    #[error("invalid option: {0}")]
    InvalidOption(&'static str),
}

/// Controls for Newton and frailty fits.
#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub max_iterations: usize,
    /// Relative change in log-likelihood that ends Newton iterations.
    pub convergence_tolerance: f64,
    /// Candidate frailty variances for the profile search.
    pub theta_grid: Vec<f64>,
    /// Relative change in marginal log-likelihood that ends EM.
    pub frailty_inner_tolerance: f64,
    pub max_em_iterations: usize,
    /// Skip the profile search and fit at this frailty variance.
    pub fixed_theta: Option<f64>,
    /// Width of the golden-section bracket (in ln theta) at which refinement stops.
    pub golden_tolerance: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            convergence_tolerance: 1e-9,
            theta_grid: log_spaced(1e-3, 10.0, 40),
            frailty_inner_tolerance: 1e-7,
            max_em_iterations: 2000,
            fixed_theta: None,
            golden_tolerance: 1e-3,
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<(), CoxError> {
        if !(self.convergence_tolerance > 0.0 && self.frailty_inner_tolerance > 0.0) {
            return Err(CoxError::InvalidOption("tolerances must be positive"));
        }
        if self.max_iterations == 0 || self.max_em_iterations == 0 {
            return Err(CoxError::InvalidOption("iteration limits must be positive"));
        }
        if self.fixed_theta.is_none() && self.theta_grid.is_empty() {
            return Err(CoxError::InvalidOption("theta grid is empty"));
        }
        if self.theta_grid.iter().any(|&t| !(t > 0.0 && t.is_finite())) {
            return Err(CoxError::InvalidOption("theta grid values must be positive"));
        }
        if let Some(t) = self.fixed_theta {
            if !(t >= 0.0 && t.is_finite()) {
                return Err(CoxError::InvalidOption("fixed theta must be nonnegative"));
            }
        }
        Ok(())
    }
}

/// `count` points evenly spaced on the log scale from `lo` to `hi` inclusive.
pub fn log_spaced(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..count)
        .map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp())
        .collect()
}

/// Coefficient magnitude beyond which the likelihood is declared monotone.
pub const DIVERGENCE_BOUND: f64 = 50.0;
