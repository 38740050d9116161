use super::HarnessError;
use crate::types::SimMetrics;

/// Relative bias of the mean HR (%), RMSE of ln HR and CI coverage (%).
/// Cohort-size columns are left as NaN for the caller to fill.
pub fn compute_metrics(
    hr_estimates: &[f64],
    ci_pairs: &[(f64, f64)],
    true_hr: f64,
) -> Result<SimMetrics, HarnessError> {
    if hr_estimates.is_empty() {
        return Err(HarnessError::NoEstimates);
    }
    if !(true_hr > 0.0) {
        return Err(HarnessError::InvalidTruth(true_hr));
    }
    if hr_estimates.len() != ci_pairs.len() {
        return Err(HarnessError::LengthMismatch);
    }
    if let Some(&bad) = hr_estimates.iter().find(|&&h| !(h > 0.0 && h.is_finite())) {
        return Err(HarnessError::NonPositiveEstimate(bad));
    }
    let n = hr_estimates.len() as f64;
    let mean_hr = hr_estimates.iter().sum::<f64>() / n;
    let log_truth = true_hr.ln();
    let mse = hr_estimates
        .iter()
        .map(|h| (h.ln() - log_truth).powi(2))
        .sum::<f64>()
        / n;
    let covered = ci_pairs
        .iter()
        .filter(|(lo, hi)| *lo <= true_hr && true_hr <= *hi)
        .count();
    Ok(SimMetrics {
        r_bias_pct: (mean_hr - true_hr) / true_hr * 100.0,
        rmse: mse.sqrt(),
        cp_pct: covered as f64 / n * 100.0,
        mean_hr,
        mean_n: f64::NAN,
        mean_events: f64::NAN,
        replicates_used: hr_estimates.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_estimates() {
        let m = compute_metrics(&[2.0, 2.0, 2.0], &[(1.0, 3.0); 3], 2.0).unwrap();
        assert_eq!(m.r_bias_pct, 0.0);
        assert_eq!(m.rmse, 0.0);
        assert_eq!(m.cp_pct, 100.0);
    }

    #[test]
    fn two_point_hand_values() {
        // mean 2.5 -> +25%; log errors -ln2, +ln2 -> RMSE ln 2
        let m = compute_metrics(&[1.0, 4.0], &[(0.5, 1.5), (3.0, 5.0)], 2.0).unwrap();
        assert!((m.r_bias_pct - 25.0).abs() < 1e-12);
        assert!((m.rmse - 2.0f64.ln()).abs() < 1e-12);
        assert_eq!(m.cp_pct, 0.0);
    }

    #[test]
    fn coverage_count() {
        let hrs = vec![2.0; 100];
        let cis: Vec<(f64, f64)> = (0..100)
            .map(|i| if i < 95 { (1.0, 3.0) } else { (2.5, 3.0) })
            .collect();
        let m = compute_metrics(&hrs, &cis, 2.0).unwrap();
        assert!((m.cp_pct - 95.0).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            compute_metrics(&[], &[], 2.0),
            Err(HarnessError::NoEstimates)
        ));
        assert!(matches!(
            compute_metrics(&[0.0], &[(0.0, 1.0)], 2.0),
            Err(HarnessError::NonPositiveEstimate(_))
        ));
        assert!(matches!(
            compute_metrics(&[1.0], &[(0.0, 1.0)], 0.0),
            Err(HarnessError::InvalidTruth(_))
        ));
    }
}
