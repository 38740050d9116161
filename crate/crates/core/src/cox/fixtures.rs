//! Small hand-built and random datasets shared by the cox unit tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Gamma};

use crate::types::CountingRow;

pub(crate) fn row(cluster: usize, stratum: u32, start: f64, stop: f64, status: bool, x: &[f64]) -> CountingRow {
    CountingRow {
        subject_id: cluster,
        cluster_id: cluster,
        stratum_id: stratum,
        start,
        stop,
        status,
        covariates: x.to_vec(),
    }
}

/// PERR-shaped rows: `n` subjects alternating treated/control, each with an
/// index date in `(0.5, 1.5)` and a post period of length `(0.5, 1.5)`.
/// Rates are `1.5 * w * exp(0.3 trt + 0.2 post + log_perr trt post)` with `w`
/// a gamma frailty of variance `frailty_variance`. Strata count prior events
/// when `stratify` is set (no pooling).
pub(crate) fn perr_rows(
    seed: u64,
    n: usize,
    log_perr: f64,
    frailty_variance: f64,
    stratify: bool,
) -> Vec<CountingRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for id in 0..n {
        let trt = (id % 2) as f64;
        let w = if frailty_variance > 0.0 {
            let shape = 1.0 / frailty_variance;
            Gamma::new(shape, frailty_variance).unwrap().sample(&mut rng)
        } else {
            1.0
        };
        let index = rng.random_range(0.5..1.5);
        let end = index + rng.random_range(0.5..1.5);
        let mut t = 0.0;
        let mut count = 0u32;
        for (post, until) in [(0.0, index), (1.0, end)] {
            let rate = 1.5 * w * (0.3 * trt + 0.2 * post + log_perr * trt * post).exp();
            let gap = Exp::new(rate).unwrap();
            let x = [trt, post, trt * post];
            loop {
                let next = t + gap.sample(&mut rng);
                let stratum = if stratify { count + 1 } else { 0 };
                if next >= until {
                    rows.push(row(id, stratum, t, until, false, &x));
                    t = until;
                    break;
                }
                rows.push(row(id, stratum, t, next, true, &x));
                t = next;
                count += 1;
            }
        }
    }
    rows
}
