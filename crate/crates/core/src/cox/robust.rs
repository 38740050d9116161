use nalgebra::DMatrix;

use super::data::{cumulative, CoxData};
use super::CoxError;
use crate::types::{CountingRow, FitResult};

/// Score residuals summed within each cluster, `C x p`.
///
/// Row residual: `status * (x - xbar(stop)) - exp(eta) * sum_k (x - xbar_k) d_k / S0_k`
/// over event times `k` in `(start, stop]` of the row's stratum.
pub fn score_residuals(
    data: &CoxData,
    beta: &[f64],
    offsets: Option<&[f64]>,
) -> Result<DMatrix<f64>, CoxError> {
    let p = data.n_covariates();
    let sets = data.risk_sets(beta, offsets)?;
    let increments = sets.hazard_jumps();
    let cum_a = cumulative(&increments);
    // one cumulative array per covariate
    let cum_b: Vec<Vec<Vec<f64>>> = (0..p)
        .map(|a| {
            let jumps: Vec<Vec<f64>> = increments
                .iter()
                .zip(&sets.xbar)
                .map(|(h, xbar)| h.iter().enumerate().map(|(k, v)| v * xbar[k * p + a]).collect())
                .collect();
            cumulative(&jumps)
        })
        .collect();
    let eta = data.linear_predictor(beta, offsets);
    let mut residuals = DMatrix::zeros(data.n_clusters(), p);
    let clusters = data.row_clusters();
    for i in 0..data.n_rows() {
        let x = data.row(i);
        let w = eta[i].exp();
        let (stratum, _, hi) = data.row_span(i);
        let da = data.span_difference(i, &cum_a);
        for a in 0..p {
            let mut r = -w * (x[a] * da - data.span_difference(i, &cum_b[a]));
            if data.status()[i] {
                r += x[a] - sets.xbar[stratum][(hi - 1) * p + a];
            }
            residuals[(clusters[i], a)] += r;
        }
    }
    Ok(residuals)
}

pub(crate) fn sandwich(
    data: &CoxData,
    beta: &[f64],
    offsets: Option<&[f64]>,
    model_variance: &DMatrix<f64>,
) -> Result<DMatrix<f64>, CoxError> {
    if data.n_clusters() < 2 {
        return Err(CoxError::TooFewClusters(data.n_clusters()));
    }
    let scores = score_residuals(data, beta, offsets)?;
    let meat = scores.transpose() * &scores;
    let v = model_variance * meat * model_variance;
    Ok((&v + v.transpose()) * 0.5)
}

/// Cluster-grouped sandwich `V (sum_c s_c s_c') V` at a fitted model.
pub fn robust_variance(rows: &[CountingRow], fit: &FitResult) -> Result<DMatrix<f64>, CoxError> {
    let data = CoxData::new(rows)?;
    sandwich(&data, &fit.coefficients, None, &fit.model_variance)
}
