//! Independent oracles shared by the integration and acceptance suites.
//!
//! Nothing here calls into the Cox engine: the partial likelihood, the
//! gamma-mixed likelihood and the logistic fit are written out directly so
//! they can be used to check the library.

#![allow(dead_code)]

use std::collections::BTreeMap;

use argmin::core::{CostFunction, Error as ArgminError, Executor};
use argmin::solver::neldermead::NelderMead;
use perr_core::cox::{fit_cox, fit_gamma_frailty, FitOptions};
use perr_core::CountingRow;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use perr_core::drim::PanelRow;
use rand_distr::{Distribution, Normal, StandardNormal};
use statrs::function::gamma::ln_gamma;

pub fn row(cluster: usize, stratum: u32, start: f64, stop: f64, status: bool, x: Vec<f64>) -> CountingRow {
    CountingRow {
        subject_id: cluster,
        cluster_id: cluster,
        stratum_id: stratum,
        start,
        stop,
        status,
        covariates: x,
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Breslow partial log-likelihood by direct enumeration of risk sets.
pub fn naive_partial_loglik(rows: &[CountingRow], beta: &[f64]) -> f64 {
    let mut ll = 0.0;
    for event in rows.iter().filter(|r| r.status) {
        let t = event.stop;
        let denom: f64 = rows
            .iter()
            .filter(|r| r.stratum_id == event.stratum_id && r.start < t && t <= r.stop)
            .map(|r| dot(&r.covariates, beta).exp())
            .sum();
        ll += dot(&event.covariates, beta) - denom.ln();
    }
    ll
}

/// Maximiser of `naive_partial_loglik` over `[-5, 5]^p` on a 1e-3 lattice
/// (p <= 2). Two dimensions are searched coarse-to-fine: every point of a
/// 0.05 lattice, then the 1e-3 lattice within 0.1 of the coarse winner.
pub fn grid_argmax(rows: &[CountingRow], p: usize) -> Vec<f64> {
    let lattice = |lo: f64, hi: f64, step: f64| -> Vec<f64> {
        let n = ((hi - lo) / step).round() as usize;
        (0..=n).map(|i| lo + step * i as f64).collect()
    };
    let best_of = |points: &mut dyn Iterator<Item = Vec<f64>>| -> Vec<f64> {
        points
            .map(|b| (naive_partial_loglik(rows, &b), b))
            .max_by(|a, b| a.0.total_cmp(&b.0))
            .expect("nonempty lattice")
            .1
    };
    match p {
        1 => best_of(&mut lattice(-5.0, 5.0, 1e-3).into_iter().map(|b| vec![b])),
        2 => {
            let coarse = lattice(-5.0, 5.0, 0.05);
            let c = best_of(&mut coarse.iter().flat_map(|&a| coarse.iter().map(move |&b| vec![a, b])));
            let xs = lattice(c[0] - 0.1, c[0] + 0.1, 1e-3);
            let ys = lattice(c[1] - 0.1, c[1] + 0.1, 1e-3);
            best_of(&mut xs.iter().flat_map(|&a| ys.iter().map(move |&b| vec![a, b])))
        }
        _ => panic!("grid oracle supports one or two coefficients"),
    }
}

/// Up to six subjects and four events, one or two covariates, optionally two
/// strata. Each subject has one or two rows.
pub fn tiny_cox_cohort<R: Rng>(rng: &mut R) -> (Vec<CountingRow>, usize) {
    let p = rng.random_range(1..=2usize);
    let n = rng.random_range(3..=6usize);
    let stratified = rng.random_bool(0.3);
    let mut rows = Vec::new();
    let mut events = 0;
    for id in 0..n {
        let stratum = if stratified { (id % 2) as u32 + 1 } else { 0 };
        let end: f64 = rng.random_range(1.0..4.0);
        let split = rng.random_bool(0.4).then(|| rng.random_range(0.2..0.8) * end);
        let mut covariates = || -> Vec<f64> {
            (0..p)
                .map(|_| if rng.random_bool(0.5) { rng.random_range(0..2) as f64 } else { rng.sample(StandardNormal) })
                .collect()
        };
        let mut pieces = Vec::new();
        match split {
            Some(s) => {
                pieces.push((0.0, s, covariates()));
                pieces.push((s, end, covariates()));
            }
            None => pieces.push((0.0, end, covariates())),
        }
        for (start, stop, x) in pieces {
            let status = events < 4 && rng.random_bool(0.5);
            events += status as usize;
            rows.push(row(id, stratum, start, stop, status, x));
        }
    }
    (rows, p)
}

/// Largest coefficient error of `fit_cox` against the grid oracle on one
/// random tiny cohort, or `None` when the draw is unusable (no interior
/// maximum: monotone likelihood, no events, non-identifiable).
pub fn cox_grid_case<R: Rng>(rng: &mut R) -> Option<f64> {
    let (rows, p) = tiny_cox_cohort(rng);
    let fit = fit_cox(&rows, &FitOptions::default()).ok()?;
    if fit.coefficients.iter().any(|b| b.abs() > 4.5) {
        return None;
    }
    let grid = grid_argmax(&rows, p);
    if grid.iter().any(|b| b.abs() > 4.9) {
        return None;
    }
    Some(
        fit.coefficients
            .iter()
            .zip(&grid)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max),
    )
}

/// `ln integral_0^inf w^d exp(-w L) g(w) dw` for a mean-one gamma density `g`
/// of variance `theta`, by composite Simpson in `u = ln w` over 24 curvature
/// widths around the integrand's peak.
pub fn ln_gamma_mixture(d: f64, cum_hazard: f64, theta: f64) -> f64 {
    let a = 1.0 / theta;
    let log_f = |u: f64| (d + a) * u - (cum_hazard + a) * u.exp();
    let peak = ((d + a) / (cum_hazard + a)).ln();
    let width = 12.0 / (d + a).sqrt();
    let (lo, hi) = (peak - width, peak + width);
    let intervals = 800;
    let h = (hi - lo) / intervals as f64;
    let top = log_f(peak);
    let mut sum = 0.0;
    for i in 0..=intervals {
        let weight = match i {
            0 => 1.0,
            i if i == intervals => 1.0,
            i if i % 2 == 1 => 4.0,
            _ => 2.0,
        };
        sum += weight * (log_f(lo + h * i as f64) - top).exp();
    }
    a * a.ln() - ln_gamma(a) + top + (sum * h / 3.0).ln()
}

/// Tiny clustered, event-stratified data for the frailty oracle.
#[derive(Debug, Clone)]
pub struct FrailtyCase {
    pub rows: Vec<CountingRow>,
    /// Distinct event times per stratum, ascending.
    pub times: BTreeMap<u32, Vec<f64>>,
}

impl FrailtyCase {
    fn n_jumps(&self) -> usize {
        self.times.values().map(Vec::len).sum()
    }

    /// Gamma-mixed full log-likelihood with one covariate. `params` holds
    /// `[beta, ln theta, ln jump...]` with jumps in stratum then time order.
    pub fn loglik(&self, params: &[f64]) -> f64 {
        let beta = params[0];
        let theta = params[1].exp().clamp(1e-6, 50.0);
        let mut jumps: BTreeMap<u32, Vec<(f64, f64)>> = BTreeMap::new();
        let mut k = 2;
        for (&s, times) in &self.times {
            let entry = jumps.entry(s).or_default();
            for &t in times {
                entry.push((t, params[k].exp()));
                k += 1;
            }
        }
        let mut by_cluster: BTreeMap<usize, (f64, f64)> = BTreeMap::new();
        let mut ll = 0.0;
        let no_events = Vec::new();
        for r in &self.rows {
            let risk = (beta * r.covariates[0]).exp();
            let stratum = jumps.get(&r.stratum_id).unwrap_or(&no_events);
            let cum: f64 = stratum
                .iter()
                .filter(|(t, _)| r.start < *t && *t <= r.stop)
                .map(|(_, j)| j)
                .sum();
            let cell = by_cluster.entry(r.cluster_id).or_default();
            cell.1 += risk * cum;
            if r.status {
                let jump = stratum.iter().find(|(t, _)| *t == r.stop).expect("event time").1;
                ll += jump.ln() + beta * r.covariates[0];
                cell.0 += 1.0;
            }
        }
        for (d, cum) in by_cluster.values() {
            ll += ln_gamma_mixture(*d, *cum, theta);
        }
        ll
    }
}

/// Three to five clusters, at most six events, one covariate, event-number
/// strata with the second and later events pooled.
pub fn tiny_frailty_cohort<R: Rng>(rng: &mut R) -> FrailtyCase {
    loop {
        let clusters = rng.random_range(3..=5usize);
        let mut rows = Vec::new();
        let mut total = 0;
        for c in 0..clusters {
            let end: f64 = rng.random_range(1.0..3.0);
            let n_events = rng.random_range(0..=3usize);
            let mut times: Vec<f64> = (0..n_events).map(|_| rng.random_range(0.05..0.95) * end).collect();
            times.sort_by(f64::total_cmp);
            total += n_events;
            let mut start = 0.0;
            for (j, &t) in times.iter().chain(std::iter::once(&end)).enumerate() {
                let x: f64 = rng.sample(StandardNormal);
                let stratum = 1 + j.min(1) as u32;
                rows.push(row(c, stratum, start, t, j < n_events, vec![x]));
                start = t;
            }
        }
        if !(2..=6).contains(&total) {
            continue;
        }
        let mut times: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
        for r in rows.iter().filter(|r| r.status) {
            times.entry(r.stratum_id).or_default().push(r.stop);
        }
        for v in times.values_mut() {
            v.sort_by(f64::total_cmp);
            v.dedup();
        }
        return FrailtyCase { rows, times };
    }
}

struct Negated<'a>(&'a FrailtyCase);

impl CostFunction for Negated<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, p: &Self::Param) -> Result<f64, ArgminError> {
        let v = -self.0.loglik(p);
        Ok(if v.is_finite() { v } else { f64::MAX })
    }
}

fn nelder_mead(case: &FrailtyCase, start: Vec<f64>, step: f64) -> (Vec<f64>, f64) {
    let mut simplex = vec![start.clone()];
    for i in 0..start.len() {
        let mut v = start.clone();
        v[i] += step;
        simplex.push(v);
    }
    let solver = NelderMead::new(simplex)
        .with_sd_tolerance(1e-12)
        .expect("valid tolerance");
    let result = Executor::new(Negated(case), solver)
        .configure(|s| s.max_iters(20_000))
        .run()
        .expect("Nelder-Mead runs");
    let state = result.state();
    (
        state.best_param.clone().expect("best point"),
        -state.best_cost,
    )
}

/// Maximises the gamma-mixed likelihood over `(beta, theta, jumps)` from
/// several starting frailty variances, restarting the simplex at the best
/// point until the optimum stops improving.
pub fn integrated_optimum(case: &FrailtyCase) -> (f64, f64) {
    let n_at_risk = case.rows.len() as f64;
    let base_jump = (1.0 / n_at_risk).ln();
    let mut best: Option<(Vec<f64>, f64)> = None;
    for ln_theta in [-4.0, -1.0, 1.0] {
        let mut start = vec![0.0, ln_theta];
        start.extend(std::iter::repeat_n(base_jump, case.n_jumps()));
        let mut current = nelder_mead(case, start, 0.5);
        for _ in 0..6 {
            let next = nelder_mead(case, current.0.clone(), 0.1);
            let done = next.1 - current.1 < 1e-10;
            current = next;
            if done {
                break;
            }
        }
        if best.as_ref().is_none_or(|b| current.1 > b.1) {
            best = Some(current);
        }
    }
    let (params, _) = best.expect("at least one start");
    (params[0], params[1].exp())
}

/// `|beta_library - beta_oracle|` on one tiny frailty cohort, or `None` when
/// the library reports the draw as unusable.
pub fn frailty_case<R: Rng>(rng: &mut R) -> Option<(f64, f64, f64)> {
    let case = tiny_frailty_cohort(rng);
    let fit = fit_gamma_frailty(&case.rows, &FitOptions::default()).ok()?;
    let beta = fit.fit.coefficients[0];
    if beta.abs() > 4.0 {
        return None;
    }
    let (oracle_beta, _) = integrated_optimum(&case);
    Some(((beta - oracle_beta).abs(), beta, fit.fit.theta.unwrap_or(0.0)))
}

/// Logistic regression by iteratively reweighted least squares on a design
/// with an intercept column already present.
pub fn logistic_irls(design: &[Vec<f64>], y: &[bool]) -> Vec<f64> {
    let p = design[0].len();
    let mut beta = vec![0.0; p];
    for _ in 0..100 {
        let mut xtwx = nalgebra::DMatrix::<f64>::zeros(p, p);
        let mut xtz = nalgebra::DVector::<f64>::zeros(p);
        for (x, &yi) in design.iter().zip(y) {
            let eta = dot(x, &beta);
            let mu = 1.0 / (1.0 + (-eta).exp());
            let w = mu * (1.0 - mu);
            let z = eta + (yi as u8 as f64 - mu) / w;
            for a in 0..p {
                xtz[a] += x[a] * w * z;
                for b in 0..p {
                    xtwx[(a, b)] += x[a] * w * x[b];
                }
            }
        }
        let next = xtwx.cholesky().expect("full rank").solve(&xtz);
        let change = next.iter().zip(&beta).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        beta = next.iter().copied().collect();
        if change < 1e-13 {
            break;
        }
    }
    beta
}

/// Panel from `logit P(y_k) = alpha + gamma y_(k-1) + beta x + b`, with
/// `b ~ N(0, sigma^2)` and a binary person-level `x`. The first response is
/// a fair coin, independent of `b`, which is what a model conditioning on
/// the first interval assumes.
pub fn drim_panel(seed: u64, people: usize, intervals: usize, alpha: f64, gamma: f64, beta: f64, sigma: f64) -> Vec<PanelRow> {
    drim_panel_with_start(seed, people, intervals, alpha, gamma, beta, sigma, true)
}

/// As [`drim_panel`]; with `exogenous_start` false the first response follows the
/// model without a lag term and so depends on `b`.
#[allow(clippy::too_many_arguments)]
pub fn drim_panel_with_start(
    seed: u64,
    people: usize,
    intervals: usize,
    alpha: f64,
    gamma: f64,
    beta: f64,
    sigma: f64,
    exogenous_start: bool,
) -> Vec<PanelRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut rows = Vec::new();
    for id in 0..people {
        let b = sigma * normal.sample(&mut rng);
        let x = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
        let mut lag = false;
        for k in 1..=intervals {
            let eta = alpha + b + beta * x + if k > 1 && lag { gamma } else { 0.0 };
            let p = if k == 1 && exogenous_start { 0.5 } else { 1.0 / (1.0 + (-eta).exp()) };
            let y = rng.random::<f64>() < p;
            rows.push(PanelRow {
                subject_id: id,
                interval_index: k,
                response: y,
                lagged_response: lag,
                covariates: vec![x],
            });
            lag = y;
        }
    }
    rows
}
