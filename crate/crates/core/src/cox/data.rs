//! Counting-process risk-set bookkeeping shared by every Cox-type fit.

use std::collections::BTreeMap;

use super::CoxError;
use crate::types::CountingRow;

#[derive(Debug, Clone)]
struct Stratum {
    /// Row indices, latest stop first.
    by_stop: Vec<usize>,
    /// Row indices, latest start first.
    by_start: Vec<usize>,
    /// Distinct event times, ascending.
    times: Vec<f64>,
}

/// Column-major view of counting-process rows with per-stratum orderings.
///
/// A row is at risk at time `t` iff `start < t <= stop` and it shares the
/// stratum of the event. Only the order of times matters.
#[derive(Debug, Clone)]
pub struct CoxData {
    n: usize,
    p: usize,
    start: Vec<f64>,
    stop: Vec<f64>,
    status: Vec<bool>,
    x: Vec<f64>,
    cluster: Vec<usize>,
    cluster_labels: Vec<usize>,
    cluster_events: Vec<f64>,
    row_stratum: Vec<usize>,
    /// Number of stratum event times `<= start` and `<= stop`.
    row_span: Vec<(usize, usize)>,
    strata: Vec<Stratum>,
    stratum_labels: Vec<u32>,
    n_events: usize,
}

/// Partial log-likelihood with its analytic derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loglik: f64,
    pub gradient: Vec<f64>,
    /// Row-major `p x p`.
    pub hessian: Vec<f64>,
}

/// Per-stratum risk-set sums at each distinct event time (ascending).
#[derive(Debug, Clone, PartialEq)]
pub struct RiskSets {
    pub deaths: Vec<Vec<f64>>,
    pub s0: Vec<Vec<f64>>,
    /// Weighted covariate means, `K x p` row-major per stratum.
    pub xbar: Vec<Vec<f64>>,
}

impl RiskSets {
    /// Breslow increments `d_k / S0_k`.
    pub fn hazard_jumps(&self) -> Vec<Vec<f64>> {
        self.deaths
            .iter()
            .zip(&self.s0)
            .map(|(d, s)| d.iter().zip(s).map(|(d, s)| d / s).collect())
            .collect()
    }
}

pub(crate) fn cumulative(jumps: &[Vec<f64>]) -> Vec<Vec<f64>> {
    jumps
        .iter()
        .map(|h| {
            let mut acc = Vec::with_capacity(h.len() + 1);
            acc.push(0.0);
            let mut sum = 0.0;
            for v in h {
                sum += v;
                acc.push(sum);
            }
            acc
        })
        .collect()
}

impl CoxData {
    pub fn new(rows: &[CountingRow]) -> Result<Self, CoxError> {
        let n = rows.len();
        if n == 0 {
            return Err(CoxError::Empty);
        }
        let p = rows[0].covariates.len();
        let mut x = Vec::with_capacity(n * p);
        let mut start = Vec::with_capacity(n);
        let mut stop = Vec::with_capacity(n);
        let mut status = Vec::with_capacity(n);
        let mut stratum_index: BTreeMap<u32, usize> = BTreeMap::new();
        let mut cluster_index: BTreeMap<usize, usize> = BTreeMap::new();
        for (i, row) in rows.iter().enumerate() {
            if row.covariates.len() != p {
                return Err(CoxError::DimensionMismatch {
                    expected: p,
                    found: row.covariates.len(),
                });
            }
            if !(row.start < row.stop) || !row.start.is_finite() || !row.stop.is_finite() {
                return Err(CoxError::BadInterval {
                    row: i,
                    start: row.start,
                    stop: row.stop,
                });
            }
            if row.covariates.iter().any(|v| !v.is_finite()) {
                return Err(CoxError::NonFinite);
            }
            x.extend_from_slice(&row.covariates);
            start.push(row.start);
            stop.push(row.stop);
            status.push(row.status);
            stratum_index.entry(row.stratum_id).or_insert(0);
            cluster_index.entry(row.cluster_id).or_insert(0);
        }
        for (slot, v) in stratum_index.values_mut().enumerate() {
            *v = slot;
        }
        for (slot, v) in cluster_index.values_mut().enumerate() {
            *v = slot;
        }
        let row_stratum: Vec<usize> = rows.iter().map(|r| stratum_index[&r.stratum_id]).collect();
        let cluster: Vec<usize> = rows.iter().map(|r| cluster_index[&r.cluster_id]).collect();
        let mut cluster_events = vec![0.0; cluster_index.len()];
        for (c, &s) in cluster.iter().zip(&status) {
            if s {
                cluster_events[*c] += 1.0;
            }
        }

        let mut members: Vec<Vec<usize>> = vec![Vec::new(); stratum_index.len()];
        for (i, &s) in row_stratum.iter().enumerate() {
            members[s].push(i);
        }
        let strata: Vec<Stratum> = members
            .into_iter()
            .map(|rows_in| {
                let mut by_stop = rows_in.clone();
                by_stop.sort_by(|&a, &b| stop[b].total_cmp(&stop[a]));
                let mut by_start = rows_in.clone();
                by_start.sort_by(|&a, &b| start[b].total_cmp(&start[a]));
                let mut times: Vec<f64> = rows_in
                    .iter()
                    .filter(|&&i| status[i])
                    .map(|&i| stop[i])
                    .collect();
                times.sort_by(f64::total_cmp);
                times.dedup();
                Stratum {
                    by_stop,
                    by_start,
                    times,
                }
            })
            .collect();
        let row_span = (0..n)
            .map(|i| {
                let times = &strata[row_stratum[i]].times;
                (
                    times.partition_point(|&t| t <= start[i]),
                    times.partition_point(|&t| t <= stop[i]),
                )
            })
            .collect();
        let n_events = status.iter().filter(|&&s| s).count();
        Ok(Self {
            n,
            p,
            start,
            stop,
            status,
            x,
            cluster,
            cluster_labels: cluster_index.keys().copied().collect(),
            cluster_events,
            row_stratum,
            row_span,
            strata,
            stratum_labels: stratum_index.keys().copied().collect(),
            n_events,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n
    }

    pub fn n_covariates(&self) -> usize {
        self.p
    }

    pub fn n_events(&self) -> usize {
        self.n_events
    }

    pub fn n_clusters(&self) -> usize {
        self.cluster_events.len()
    }

    pub fn n_strata(&self) -> usize {
        self.strata.len()
    }

    pub fn stratum_labels(&self) -> &[u32] {
        &self.stratum_labels
    }

    pub fn cluster_labels(&self) -> &[usize] {
        &self.cluster_labels
    }

    /// Compact cluster index of each row.
    pub fn row_clusters(&self) -> &[usize] {
        &self.cluster
    }

    pub fn cluster_events(&self) -> &[f64] {
        &self.cluster_events
    }

    pub fn status(&self) -> &[bool] {
        &self.status
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.p..(i + 1) * self.p]
    }

    pub fn linear_predictor(&self, beta: &[f64], offsets: Option<&[f64]>) -> Vec<f64> {
        (0..self.n)
            .map(|i| {
                let xb: f64 = self.row(i).iter().zip(beta).map(|(x, b)| x * b).sum();
                xb + offsets.map_or(0.0, |o| o[i])
            })
            .collect()
    }

    /// Breslow partial log-likelihood, gradient and (optionally) Hessian.
    pub fn evaluate(
        &self,
        beta: &[f64],
        offsets: Option<&[f64]>,
        with_hessian: bool,
    ) -> Result<Evaluation, CoxError> {
        let (eval, _) = self.sweep(beta, offsets, with_hessian, false)?;
        Ok(eval)
    }

    pub fn risk_sets(&self, beta: &[f64], offsets: Option<&[f64]>) -> Result<RiskSets, CoxError> {
        let (_, sets) = self.sweep(beta, offsets, false, true)?;
        Ok(sets.expect("requested"))
    }

    /// Evaluation and risk-set sums in one pass.
    pub fn evaluate_with_risk_sets(
        &self,
        beta: &[f64],
        offsets: Option<&[f64]>,
    ) -> Result<(Evaluation, RiskSets), CoxError> {
        let (eval, sets) = self.sweep(beta, offsets, true, true)?;
        Ok((eval, sets.expect("requested")))
    }

    /// Sum over event-time spans of a row: `cum[hi] - cum[lo]`.
    pub(crate) fn span_difference(&self, row: usize, cum: &[Vec<f64>]) -> f64 {
        let (lo, hi) = self.row_span[row];
        let c = &cum[self.row_stratum[row]];
        c[hi] - c[lo]
    }

    pub(crate) fn row_span(&self, row: usize) -> (usize, usize, usize) {
        let (lo, hi) = self.row_span[row];
        (self.row_stratum[row], lo, hi)
    }

    fn sweep(
        &self,
        beta: &[f64],
        offsets: Option<&[f64]>,
        with_hessian: bool,
        with_sets: bool,
    ) -> Result<(Evaluation, Option<RiskSets>), CoxError> {
        let p = self.p;
        if beta.len() != p {
            return Err(CoxError::DimensionMismatch {
                expected: p,
                found: beta.len(),
            });
        }
        if let Some(o) = offsets {
            if o.len() != self.n {
                return Err(CoxError::DimensionMismatch {
                    expected: self.n,
                    found: o.len(),
                });
            }
        }
        if self.n_events == 0 {
            return Err(CoxError::NoEvents);
        }
        let eta = self.linear_predictor(beta, offsets);
        let weight: Vec<f64> = eta.iter().map(|e| e.exp()).collect();

        let mut loglik = 0.0;
        let mut gradient = vec![0.0; p];
        let mut hessian = vec![0.0; p * p];
        let mut s1 = vec![0.0; p];
        let mut s2 = vec![0.0; p * p];
        let mut event_x = vec![0.0; p];
        let mut sets = with_sets.then(|| RiskSets {
            deaths: Vec::with_capacity(self.strata.len()),
            s0: Vec::with_capacity(self.strata.len()),
            xbar: Vec::with_capacity(self.strata.len()),
        });

        for stratum in &self.strata {
            let k_total = stratum.times.len();
            let mut deaths_k = vec![0.0; k_total];
            let mut s0_k = vec![0.0; k_total];
            let mut xbar_k = vec![0.0; if with_sets { k_total * p } else { 0 }];
            let mut s0 = 0.0;
            s1.iter_mut().for_each(|v| *v = 0.0);
            s2.iter_mut().for_each(|v| *v = 0.0);
            let (mut add, mut remove) = (0usize, 0usize);
            for k in (0..k_total).rev() {
                let t = stratum.times[k];
                let mut deaths = 0.0;
                let mut event_eta = 0.0;
                event_x.iter_mut().for_each(|v| *v = 0.0);
                while add < stratum.by_stop.len() && self.stop[stratum.by_stop[add]] >= t {
                    let i = stratum.by_stop[add];
                    self.accumulate(i, weight[i], &mut s0, &mut s1, &mut s2, with_hessian);
                    if self.status[i] && self.stop[i] == t {
                        deaths += 1.0;
                        event_eta += eta[i];
                        for (acc, v) in event_x.iter_mut().zip(self.row(i)) {
                            *acc += v;
                        }
                    }
                    add += 1;
                }
                while remove < stratum.by_start.len() && self.start[stratum.by_start[remove]] >= t {
                    let i = stratum.by_start[remove];
                    self.accumulate(i, -weight[i], &mut s0, &mut s1, &mut s2, with_hessian);
                    remove += 1;
                }
                if !(s0 > 0.0) {
                    return Err(CoxError::NumericalFailure("empty risk set at an event time"));
                }
                loglik += event_eta - deaths * s0.ln();
                for a in 0..p {
                    let mean_a = s1[a] / s0;
                    gradient[a] += event_x[a] - deaths * mean_a;
                    if with_hessian {
                        for b in 0..=a {
                            let v = deaths * (s2[a * p + b] / s0 - mean_a * s1[b] / s0);
                            hessian[a * p + b] -= v;
                        }
                    }
                    if with_sets {
                        xbar_k[k * p + a] = mean_a;
                    }
                }
                deaths_k[k] = deaths;
                s0_k[k] = s0;
            }
            if let Some(sets) = sets.as_mut() {
                sets.deaths.push(deaths_k);
                sets.s0.push(s0_k);
                sets.xbar.push(xbar_k);
            }
        }
        if with_hessian {
            for a in 0..p {
                for b in 0..a {
                    hessian[b * p + a] = hessian[a * p + b];
                }
            }
        }
        Ok((
            Evaluation {
                loglik,
                gradient,
                hessian,
            },
            sets,
        ))
    }

    #[inline]
    fn accumulate(
        &self,
        i: usize,
        w: f64,
        s0: &mut f64,
        s1: &mut [f64],
        s2: &mut [f64],
        with_hessian: bool,
    ) {
        let p = self.p;
        let xi = self.row(i);
        *s0 += w;
        for a in 0..p {
            let wa = w * xi[a];
            s1[a] += wa;
            if with_hessian {
                for b in 0..=a {
                    s2[a * p + b] += wa * xi[b];
                }
            }
        }
    }
}
