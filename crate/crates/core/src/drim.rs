//! Dynamic random-intercept model (DRIM) for diagnosing event dependence.
//!
//! Follow-up is cut into equal intervals; the indicator of any event in an
//! interval is regressed on the previous interval's indicator with a
//! person-level normal random intercept:
//!
//! `logit P(y_ik = 1) = alpha + gamma * y_i,k-1 + x_ik' beta + sigma_b * z_i`, `z_i ~ N(0, 1)`.
//!
//! The first interval of each person only supplies a lag. The intercept is
//! integrated out by adaptive Gauss-Hermite quadrature centred at each
//! person's posterior mode, and the lag odds ratio `exp(gamma)` measures
//! event dependence.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use statrs::function::erf::erfc;
use thiserror::Error;

use crate::types::{DrimResult, SubjectRecord};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DrimError {
    #[error("interval length must be positive (got {0})")]
    BadInterval(f64),
    #[error("no subject contributes two or more intervals")]
    NoTransitions,
    #[error("all modelled responses are {0}; the model is not identifiable")]
    DegenerateResponse(u8),
    #[error("subject {id} has no numeric value for covariate {name}")]
    MissingCovariate { id: String, name: String },
    #[error("inconsistent covariate dimension in panel row {0}")]
    DimensionMismatch(usize),
    #[error("quadrature needs at least one node")]
    NoNodes,
    #[error("optimiser did not converge after {0} iterations")]
    NotConverged(usize),
    #[error("information matrix is not positive definite at the optimum")]
    SingularInformation,
}

/// One interval of one person.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelRow {
    pub subject_id: usize,
    /// 1-based.
    pub interval_index: usize,
    pub response: bool,
    pub lagged_response: bool,
    pub covariates: Vec<f64>,
}

/// Cuts each follow-up into intervals of `interval_length` from entry. A
/// trailing partial interval is kept when it spans at least half a length.
pub fn discretize(subjects: &[SubjectRecord], interval_length: f64) -> Result<Vec<PanelRow>, DrimError> {
    discretize_with_covariates(subjects, interval_length, &[])
}

/// As [`discretize`], attaching the named time-constant covariates to every row.
pub fn discretize_with_covariates(
    subjects: &[SubjectRecord],
    interval_length: f64,
    covariates: &[&str],
) -> Result<Vec<PanelRow>, DrimError> {
    if !(interval_length > 0.0 && interval_length.is_finite()) {
        return Err(DrimError::BadInterval(interval_length));
    }
    let mut panel = Vec::new();
    for (subject_id, s) in subjects.iter().enumerate() {
        let values = covariates
            .iter()
            .map(|&name| {
                s.real(name).ok_or_else(|| DrimError::MissingCovariate {
                    id: s.id.clone(),
                    name: name.to_string(),
                })
            })
            .collect::<Result<Vec<f64>, _>>()?;
        let span = s.end_time - s.entry_time;
        let ratio = span / interval_length;
        let mut full = (ratio + 1e-9).floor() as usize;
        let remainder = span - full as f64 * interval_length;
        if remainder >= 0.5 * interval_length - 1e-9 * interval_length && remainder > 1e-9 * interval_length {
            full += 1;
        }
        let mut lag = false;
        for k in 1..=full {
            let lo = s.entry_time + (k - 1) as f64 * interval_length;
            let hi = (s.entry_time + k as f64 * interval_length).min(s.end_time);
            let response = s.event_times.iter().any(|&t| t > lo && t <= hi);
            panel.push(PanelRow {
                subject_id,
                interval_index: k,
                response,
                lagged_response: lag,
                covariates: values.clone(),
            });
            lag = response;
        }
    }
    Ok(panel)
}

/// Gauss-Hermite rule for weight `exp(-x^2)` via Golub-Welsch.
pub fn gauss_hermite(nodes: usize) -> (Vec<f64>, Vec<f64>) {
    let mut jacobi = DMatrix::zeros(nodes, nodes);
    for k in 1..nodes {
        let off = (k as f64 / 2.0).sqrt();
        jacobi[(k, k - 1)] = off;
        jacobi[(k - 1, k)] = off;
    }
    let eigen = SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> = (0..nodes)
        .map(|j| {
            let v0 = eigen.eigenvectors[(0, j)];
            (eigen.eigenvalues[j], std::f64::consts::PI.sqrt() * v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DrimOptions {
    pub quadrature_nodes: usize,
    pub max_iterations: usize,
    /// Relative log-likelihood change and gradient size at convergence.
    pub tolerance: f64,
    /// Fix the random-intercept SD at zero (ordinary logistic regression).
    pub fix_sigma_zero: bool,
    pub initial_sigma: f64,
}

impl Default for DrimOptions {
    fn default() -> Self {
        Self {
            quadrature_nodes: 15,
            max_iterations: 200,
            tolerance: 1e-10,
            fix_sigma_zero: false,
            initial_sigma: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
struct Person {
    /// Modelled rows: (response, design row [1, lag, x...]).
    responses: Vec<bool>,
    design: Vec<Vec<f64>>,
}

/// Prepared likelihood for a panel. Parameters are ordered
/// `[alpha, gamma, beta..., sigma_b]`.
#[derive(Debug, Clone)]
pub struct DrimModel {
    people: Vec<Person>,
    n_fixed: usize,
    nodes: Vec<f64>,
    log_weights: Vec<f64>,
}

fn log1p_exp(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl DrimModel {
    pub fn new(panel: &[PanelRow], quadrature_nodes: usize) -> Result<Self, DrimError> {
        if quadrature_nodes == 0 {
            return Err(DrimError::NoNodes);
        }
        let n_cov = panel.first().map_or(0, |r| r.covariates.len());
        let mut people: Vec<Person> = Vec::new();
        let mut index: std::collections::BTreeMap<usize, usize> = Default::default();
        let mut ones = 0usize;
        let mut total = 0usize;
        for (i, row) in panel.iter().enumerate() {
            if row.covariates.len() != n_cov {
                return Err(DrimError::DimensionMismatch(i));
            }
            if row.interval_index < 2 {
                continue;
            }
            let slot = *index.entry(row.subject_id).or_insert_with(|| {
                people.push(Person {
                    responses: Vec::new(),
                    design: Vec::new(),
                });
                people.len() - 1
            });
            let mut design = Vec::with_capacity(2 + n_cov);
            design.push(1.0);
            design.push(if row.lagged_response { 1.0 } else { 0.0 });
            design.extend_from_slice(&row.covariates);
            people[slot].responses.push(row.response);
            people[slot].design.push(design);
            ones += usize::from(row.response);
            total += 1;
        }
        if total == 0 {
            return Err(DrimError::NoTransitions);
        }
        if ones == 0 {
            return Err(DrimError::DegenerateResponse(0));
        }
        if ones == total {
            return Err(DrimError::DegenerateResponse(1));
        }
        let (nodes, weights) = gauss_hermite(quadrature_nodes);
        let log_weights = nodes
            .iter()
            .zip(&weights)
            .map(|(x, w)| w.ln() + x * x)
            .collect();
        Ok(Self {
            people,
            n_fixed: 2 + n_cov,
            nodes,
            log_weights,
        })
    }

    pub fn n_parameters(&self) -> usize {
        self.n_fixed + 1
    }

    fn fixed_eta(&self, person: &Person, params: &[f64]) -> Vec<f64> {
        person
            .design
            .iter()
            .map(|d| d.iter().zip(params).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Posterior mode and curvature scale of the standardised intercept.
    fn mode(&self, person: &Person, eta: &[f64], sigma: f64) -> (f64, f64) {
        let mut z = 0.0;
        let mut curvature = 1.0;
        for _ in 0..50 {
            let mut grad = -z;
            curvature = 1.0;
            for (e, &y) in eta.iter().zip(&person.responses) {
                let p = sigmoid(e + sigma * z);
                grad += sigma * (f64::from(u8::from(y)) - p);
                curvature += sigma * sigma * p * (1.0 - p);
            }
            let step = grad / curvature;
            z += step;
            if step.abs() < 1e-12 {
                break;
            }
        }
        (z, 1.0 / curvature.sqrt())
    }

    /// Marginal log-likelihood and its gradient.
    pub fn loglik_gradient(&self, params: &[f64]) -> (f64, Vec<f64>) {
        let q = self.n_parameters();
        let sigma = params[q - 1];
        let mut ll = 0.0;
        let mut grad = vec![0.0; q];
        let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        let mut log_terms = vec![0.0; self.nodes.len()];
        let mut node_scores = vec![vec![0.0; q]; self.nodes.len()];
        for person in &self.people {
            let eta = self.fixed_eta(person, params);
            let (center, scale) = self.mode(person, &eta, sigma);
            let spread = std::f64::consts::SQRT_2 * scale;
            for (j, &x) in self.nodes.iter().enumerate() {
                let z = center + spread * x;
                let mut h = -0.5 * z * z - half_log_2pi;
                let score = &mut node_scores[j];
                score.iter_mut().for_each(|v| *v = 0.0);
                for ((e, &y), d) in eta.iter().zip(&person.responses).zip(&person.design) {
                    let lin = e + sigma * z;
                    let yv = f64::from(u8::from(y));
                    h += yv * lin - log1p_exp(lin);
                    let resid = yv - sigmoid(lin);
                    for (s, dv) in score.iter_mut().zip(d) {
                        *s += resid * dv;
                    }
                    score[q - 1] += resid * z;
                }
                log_terms[j] = self.log_weights[j] + h;
            }
            let max = log_terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = log_terms.iter().map(|t| (t - max).exp()).sum();
            ll += max + total.ln() + spread.ln();
            for (j, t) in log_terms.iter().enumerate() {
                let weight = (t - max).exp() / total;
                for (g, s) in grad.iter_mut().zip(&node_scores[j]) {
                    *g += weight * s;
                }
            }
        }
        (ll, grad)
    }

    pub fn loglik(&self, params: &[f64]) -> f64 {
        self.loglik_gradient(params).0
    }

    /// Central-difference Hessian of the analytic gradient over `free` parameters.
    fn hessian(&self, params: &[f64], free: usize) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(free, free);
        for a in 0..free {
            let step = 1e-5 * (1.0 + params[a].abs());
            let mut up = params.to_vec();
            up[a] += step;
            let mut down = params.to_vec();
            down[a] -= step;
            let (_, gu) = self.loglik_gradient(&up);
            let (_, gd) = self.loglik_gradient(&down);
            for b in 0..free {
                h[(b, a)] = (gu[b] - gd[b]) / (2.0 * step);
            }
        }
        (&h + h.transpose()) * 0.5
    }
}

/// Maximum-likelihood DRIM fit.
pub fn fit_drim(panel: &[PanelRow], options: &DrimOptions) -> Result<DrimResult, DrimError> {
    let model = DrimModel::new(panel, options.quadrature_nodes)?;
    let q = model.n_parameters();
    // sigma is the last parameter; when fixed at zero only the first q - 1 move
    let free = if options.fix_sigma_zero { q - 1 } else { q };
    let mut params = vec![0.0; q];
    if !options.fix_sigma_zero {
        params[q - 1] = options.initial_sigma;
    }
    let (mut ll, mut grad) = model.loglik_gradient(&params);
    let mut converged = false;
    let mut iterations = 0;
    for iteration in 1..=options.max_iterations {
        iterations = iteration;
        let info = -model.hessian(&params, free);
        let g = DVector::from_iterator(free, grad[..free].iter().copied());
        let mut ridge = 0.0;
        let step = loop {
            let shifted = &info + DMatrix::identity(free, free) * ridge;
            if let Some(chol) = shifted.cholesky() {
                break chol.solve(&g);
            }
            ridge = if ridge == 0.0 { 1e-6 } else { ridge * 10.0 };
        };
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..30 {
            let mut candidate = params.clone();
            for (c, s) in candidate.iter_mut().zip(step.iter()) {
                *c += scale * s;
            }
            let (cll, cgrad) = model.loglik_gradient(&candidate);
            if cll.is_finite() && cll >= ll - 1e-12 * ll.abs() {
                accepted = Some((candidate, cll, cgrad));
                break;
            }
            scale *= 0.5;
        }
        let Some((candidate, cll, cgrad)) = accepted else {
            converged = true;
            break;
        };
        let change = (cll - ll).abs() / (ll.abs() + 1.0);
        params = candidate;
        ll = cll;
        grad = cgrad;
        let grad_norm = grad[..free].iter().map(|g| g.abs()).fold(0.0, f64::max);
        if change < options.tolerance && grad_norm < 1e-6 * (1.0 + ll.abs()).sqrt() {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(DrimError::NotConverged(iterations));
    }
    let info = -model.hessian(&params, free);
    let covariance = info
        .cholesky()
        .ok_or(DrimError::SingularInformation)?
        .inverse();
    let gamma = params[1];
    let se = covariance[(1, 1)].max(0.0).sqrt();
    Ok(DrimResult {
        lag_coefficient: gamma,
        lag_se: se,
        odds_ratio: gamma.exp(),
        ci_low: (gamma - 1.96 * se).exp(),
        ci_high: (gamma + 1.96 * se).exp(),
        p_value: erfc((gamma / se).abs() / std::f64::consts::SQRT_2),
        intercept: params[0],
        covariate_coefficients: params[2..q - 1].to_vec(),
        sigma_b: params[q - 1].abs(),
        log_likelihood: ll,
        iterations,
        converged,
    })
}
