//! Shared gamma frailty Cox model.
//!
//! For a fixed frailty variance `theta` the marginal likelihood is
//! maximised by EM over the regression coefficients and the Breslow baseline
//! jumps; the E-step posterior frailty mean is closed form by gamma
//! conjugacy. `theta` itself is chosen by profiling the marginal likelihood
//! over a grid and refining with golden-section search.

use statrs::function::gamma::ln_gamma;

use super::data::{cumulative, CoxData};
use super::fit::{default_names, information_inverse, newton};
use super::{CoxError, FitOptions};
use crate::types::{CountingRow, FitResult};

/// Posterior frailty means `(1/theta + d_c) / (1/theta + Lambda_c)`.
pub fn frailty_posterior(theta: f64, events: &[f64], cum_hazard: &[f64]) -> Vec<f64> {
    let a = 1.0 / theta;
    events
        .iter()
        .zip(cum_hazard)
        .map(|(d, l)| (a + d) / (a + l))
        .collect()
}

fn cluster_term(theta: f64, events: f64, cum_hazard: f64) -> f64 {
    if theta == 0.0 {
        return -cum_hazard;
    }
    let a = 1.0 / theta;
    a * a.ln() - ln_gamma(a) + ln_gamma(a + events) - (a + events) * (a + cum_hazard).ln()
}

/// Per-cluster cumulative hazard `sum_rows exp(x'beta) (H(stop) - H(start))`
/// for baseline jumps `jumps` (per stratum, ascending event times).
pub(crate) fn cluster_cum_hazard(data: &CoxData, beta: &[f64], jumps: &[Vec<f64>]) -> Vec<f64> {
    let cum = cumulative(jumps);
    let eta = data.linear_predictor(beta, None);
    let mut out = vec![0.0; data.n_clusters()];
    for (i, &c) in data.row_clusters().iter().enumerate() {
        out[c] += eta[i].exp() * data.span_difference(i, &cum);
    }
    out
}

/// Gamma-frailty marginal log-likelihood at coefficients `beta`, baseline
/// jumps `jumps` (per stratum, ascending event times) and variance `theta`.
/// `theta = 0` gives the frailty-free full likelihood.
pub fn marginal_loglik(data: &CoxData, beta: &[f64], jumps: &[Vec<f64>], theta: f64) -> f64 {
    let cum_hazard = cluster_cum_hazard(data, beta, jumps);
    marginal_from_parts(data, beta, jumps, theta, &cum_hazard)
}

fn marginal_from_parts(
    data: &CoxData,
    beta: &[f64],
    jumps: &[Vec<f64>],
    theta: f64,
    cum_hazard: &[f64],
) -> f64 {
    let eta = data.linear_predictor(beta, None);
    let mut ll = 0.0;
    for i in 0..data.n_rows() {
        if data.status()[i] {
            let (stratum, _, hi) = data.row_span(i);
            ll += eta[i] + jumps[stratum][hi - 1].ln();
        }
    }
    for (d, l) in data.cluster_events().iter().zip(cum_hazard) {
        ll += cluster_term(theta, *d, *l);
    }
    ll
}

/// Current EM iterate.
#[derive(Debug, Clone, PartialEq)]
pub struct FrailtyState {
    pub beta: Vec<f64>,
    /// Posterior frailty mean per cluster (compact cluster order).
    pub frailty: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProfilePoint {
    pub theta: f64,
    pub loglik: f64,
    pub em_iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThetaBoundary {
    Lower,
    Upper,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrailtyFit {
    pub fit: FitResult,
    pub frailty: Vec<f64>,
    pub profile: Vec<ProfilePoint>,
    pub boundary: Option<ThetaBoundary>,
}

struct ThetaSolution {
    state: FrailtyState,
    loglik: f64,
    iterations: usize,
}

fn row_offsets(data: &CoxData, frailty: &[f64]) -> Vec<f64> {
    data.row_clusters()
        .iter()
        .map(|&c| frailty[c].ln())
        .collect()
}

/// Plain (stratified) Cox fit and its full likelihood: the `theta = 0` limit.
fn solve_without_frailty(
    data: &CoxData,
    start: &[f64],
    options: &FitOptions,
) -> Result<ThetaSolution, CoxError> {
    let outcome = newton(data, None, start, options)?;
    if !outcome.converged {
        return Err(CoxError::NotConverged(outcome.iterations));
    }
    let jumps = data.risk_sets(&outcome.beta, None)?.hazard_jumps();
    let loglik = marginal_loglik(data, &outcome.beta, &jumps, 0.0);
    Ok(ThetaSolution {
        state: FrailtyState {
            beta: outcome.beta,
            frailty: vec![1.0; data.n_clusters()],
        },
        loglik,
        iterations: outcome.iterations,
    })
}

/// EM at fixed `theta > 0` from a warm start. Each M-step takes one
/// Newton step on the offset partial likelihood.
fn solve_at_theta(
    data: &CoxData,
    theta: f64,
    warm: &FrailtyState,
    options: &FitOptions,
) -> Result<ThetaSolution, CoxError> {
    let p = data.n_covariates();
    let mut beta = warm.beta.clone();
    let mut frailty = warm.frailty.clone();
    let mut previous = f64::NEG_INFINITY;
    let tol = options.frailty_inner_tolerance;
    for iteration in 1..=options.max_em_iterations {
        let offsets = row_offsets(data, &frailty);
        let eval = data.evaluate(&beta, Some(&offsets), true)?;
        let info = nalgebra::DMatrix::from_row_slice(p, p, &eval.hessian).map(|v| -v);
        let step = info
            .cholesky()
            .ok_or(CoxError::NumericalFailure("singular information in frailty M-step"))?
            .solve(&nalgebra::DMatrix::from_column_slice(p, 1, &eval.gradient));
        let max_step = step.iter().map(|s| s.abs()).fold(0.0, f64::max);
        for (b, s) in beta.iter_mut().zip(step.iter()) {
            *b += s;
        }
        if let Some(v) = beta.iter().find(|b| b.abs() > super::DIVERGENCE_BOUND) {
            return Err(CoxError::MonotoneLikelihood { index: 0, value: *v });
        }
        let jumps = data.risk_sets(&beta, Some(&offsets))?.hazard_jumps();
        let cum_hazard = cluster_cum_hazard(data, &beta, &jumps);
        let loglik = marginal_from_parts(data, &beta, &jumps, theta, &cum_hazard);
        let updated = frailty_posterior(theta, data.cluster_events(), &cum_hazard);
        let max_shift = updated
            .iter()
            .zip(&frailty)
            .map(|(a, b)| (a.ln() - b.ln()).abs())
            .fold(0.0, f64::max);
        frailty = updated;
        if !loglik.is_finite() {
            return Err(CoxError::NumericalFailure("non-finite marginal likelihood"));
        }
        let change = (loglik - previous).abs() / (loglik.abs() + 1.0);
        previous = loglik;
        if change < tol && max_step < tol.sqrt() && max_shift < tol.sqrt() {
            return Ok(ThetaSolution {
                state: FrailtyState { beta, frailty },
                loglik,
                iterations: iteration,
            });
        }
    }
    Err(CoxError::EmNotConverged {
        theta,
        iterations: options.max_em_iterations,
    })
}

fn solve(
    data: &CoxData,
    theta: f64,
    warm: &FrailtyState,
    options: &FitOptions,
) -> Result<ThetaSolution, CoxError> {
    if theta == 0.0 {
        solve_without_frailty(data, &warm.beta, options)
    } else {
        solve_at_theta(data, theta, warm, options)
    }
}

const GOLDEN: f64 = 0.618_033_988_749_894_8;

/// Shared gamma frailty fit on prepared data.
pub fn fit_gamma_frailty_data(data: &CoxData, options: &FitOptions) -> Result<FrailtyFit, CoxError> {
    options.validate()?;
    let p = data.n_covariates();
    let base = solve_without_frailty(data, &vec![0.0; p], options)?;
    let mut profile = vec![ProfilePoint {
        theta: 0.0,
        loglik: base.loglik,
        em_iterations: base.iterations,
    }];

    let (theta_hat, best, boundary) = match options.fixed_theta {
        Some(theta) => {
            let solution = solve(data, theta, &base.state, options)?;
            profile.push(ProfilePoint {
                theta,
                loglik: solution.loglik,
                em_iterations: solution.iterations,
            });
            (theta, solution, None)
        }
        None => profile_search(data, base, options, &mut profile)?,
    };

    let offsets = row_offsets(data, &best.state.frailty);
    let eval = data.evaluate(&best.state.beta, Some(&offsets), true)?;
    let model_variance = information_inverse(&eval, p)?;
    Ok(FrailtyFit {
        fit: FitResult {
            names: default_names(p),
            coefficients: best.state.beta.clone(),
            model_variance,
            robust_variance: None,
            theta: Some(theta_hat),
            log_likelihood: best.loglik,
            iterations: best.iterations,
            converged: true,
        },
        frailty: best.state.frailty,
        profile,
        boundary,
    })
}

fn profile_search(
    data: &CoxData,
    base: ThetaSolution,
    options: &FitOptions,
    profile: &mut Vec<ProfilePoint>,
) -> Result<(f64, ThetaSolution, Option<ThetaBoundary>), CoxError> {
    let mut grid = options.theta_grid.clone();
    grid.sort_by(f64::total_cmp);
    grid.dedup();

    let mut warm = base.state.clone();
    let mut values = vec![base.loglik];
    let mut best_index = 0usize;
    let mut best = base;
    for &theta in &grid {
        let solution = solve_at_theta(data, theta, &warm, options)?;
        profile.push(ProfilePoint {
            theta,
            loglik: solution.loglik,
            em_iterations: solution.iterations,
        });
        values.push(solution.loglik);
        warm = solution.state.clone();
        if solution.loglik > best.loglik {
            best = solution;
            best_index = values.len() - 1;
        }
    }
    // candidate thetas: index 0 is theta = 0, index i >= 1 is grid[i - 1]
    let theta_at = |i: usize| if i == 0 { 0.0 } else { grid[i - 1] };
    if best_index == 0 {
        return Ok((0.0, best, Some(ThetaBoundary::Lower)));
    }
    if best_index == values.len() - 1 {
        return Ok((theta_at(best_index), best, Some(ThetaBoundary::Upper)));
    }
    let low = theta_at(best_index - 1);
    let high = theta_at(best_index + 1);
    // golden section in ln(theta), or on theta itself when the bracket touches 0
    let linear = low == 0.0;
    let to_theta = |u: f64| if linear { u } else { u.exp() };
    let (mut a, mut b) = if linear {
        (low, high)
    } else {
        (low.ln(), high.ln())
    };
    let width_tol = if linear {
        options.golden_tolerance * grid[0]
    } else {
        options.golden_tolerance
    };
    let mut evaluate = |u: f64, warm: &FrailtyState| -> Result<ThetaSolution, CoxError> {
        let theta = to_theta(u);
        let s = solve(data, theta, warm, options)?;
        profile.push(ProfilePoint {
            theta,
            loglik: s.loglik,
            em_iterations: s.iterations,
        });
        Ok(s)
    };
    let mut c = b - GOLDEN * (b - a);
    let mut d = a + GOLDEN * (b - a);
    let mut fc = evaluate(c, &best.state)?;
    let mut fd = evaluate(d, &best.state)?;
    while (b - a).abs() > width_tol {
        if fc.loglik >= fd.loglik {
            b = d;
            d = c;
            fd = fc;
            c = b - GOLDEN * (b - a);
            fc = evaluate(c, &fd.state)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + GOLDEN * (b - a);
            fd = evaluate(d, &fc.state)?;
        }
    }
    let (u, refined) = if fc.loglik >= fd.loglik { (c, fc) } else { (d, fd) };
    if refined.loglik >= best.loglik {
        Ok((to_theta(u), refined, None))
    } else {
        Ok((theta_at(best_index), best, None))
    }
}

pub fn fit_gamma_frailty(rows: &[CountingRow], options: &FitOptions) -> Result<FrailtyFit, CoxError> {
    fit_gamma_frailty_data(&CoxData::new(rows)?, options)
}
