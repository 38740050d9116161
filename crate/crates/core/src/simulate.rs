//! Synthetic recurrent-event cohorts with confounded treatment uptake,
//! gamma frailty and optional event dependence, generated by thinning.

use rand::Rng;
use rand_distr::{Distribution, Exp1, Gamma};
use thiserror::Error;

use crate::rng::{replicate_rng, StreamPurpose};
use crate::types::{ConfigError, Dependence, ScenarioConfig, SubjectRecord};

/// Decay rate of the transient dependence kernel.
pub const TRANSIENT_DECAY: f64 = 0.5;

/// Hard cap on simulated events for one person; explosive intensities stop here.
pub const MAX_EVENTS_PER_SUBJECT: usize = 10_000;

/// First candidate time of the thinning walk and the envelope time for k <= 1.
pub const THINNING_ORIGIN: f64 = 0.001;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("frailty variance must be nonnegative and finite (got {0})")]
    NegativeVariance(f64),
    #[error("invalid intensity parameter: {0}")]
    InvalidParameter(&'static str),
    #[error(
        "thinning envelope violated at t = {time}: intensity {intensity} exceeds bound {bound} \
         with {prior_events} prior events"
    )]
    EnvelopeViolation {
        time: f64,
        intensity: f64,
        bound: f64,
        prior_events: usize,
    },
    #[error("intensity exploded after {0} events for one person")]
    Runaway(usize),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

/// Mean-one gamma draw with the given variance; exactly 1 when the variance is 0.
pub fn draw_frailty<R: Rng + ?Sized>(variance: f64, rng: &mut R) -> Result<f64, SimError> {
    if !(variance >= 0.0 && variance.is_finite()) {
        return Err(SimError::NegativeVariance(variance));
    }
    if variance == 0.0 {
        return Ok(1.0);
    }
    let gamma = Gamma::new(1.0 / variance, variance)
        .map_err(|_| SimError::NegativeVariance(variance))?;
    Ok(gamma.sample(rng))
}

/// Inverts the treatment-uptake cumulative hazard
/// `H(t) = sqrt(t) * u * exp(c0 + 0.5 x + 0.5 z)` at a unit-exponential level.
pub fn treatment_time_from_exponential(level: f64, x: f64, z: f64, u: f64, c0: f64) -> f64 {
    let scale = u * (c0 + 0.5 * x + 0.5 * z).exp();
    (level / scale).powi(2)
}

pub fn draw_treatment_time<R: Rng + ?Sized>(
    x: f64,
    z: f64,
    u: f64,
    c0: f64,
    rng: &mut R,
) -> Result<f64, SimError> {
    if !(u > 0.0) {
        return Err(SimError::InvalidParameter("u must be positive"));
    }
    let level: f64 = Exp1.sample(rng);
    Ok(treatment_time_from_exponential(level, x, z, u, c0))
}

/// Log-rate shift at time `t` given the sorted event history.
pub fn dependence_effect(history: &[f64], t: f64, dependence: Dependence) -> f64 {
    match dependence {
        Dependence::None => 0.0,
        Dependence::Constant(zeta) => {
            let prior = history.iter().take_while(|&&s| s < t).count();
            zeta * (prior as f64 + 1.0).ln()
        }
        Dependence::Transient(psi) => history
            .iter()
            .filter(|&&s| s < t)
            .map(|&s| psi * (-TRANSIENT_DECAY * (t - s)).exp())
            .sum(),
        Dependence::TransientLast(psi) => history
            .iter()
            .take_while(|&&s| s < t)
            .last()
            .map_or(0.0, |&s| psi * (-TRANSIENT_DECAY * (t - s)).exp()),
    }
}

/// Running value of the dependence term along a thinning walk, updated in
/// constant time per step instead of rescanning the history.
#[derive(Debug, Clone, Copy)]
struct DependenceState {
    dependence: Dependence,
    events: usize,
    /// Sum of exp(-decay (at - t_j)) over events t_j <= at.
    kernel_sum: f64,
    at: f64,
    /// Most recent event time.
    last: f64,
}

impl DependenceState {
    fn new(dependence: Dependence, origin: f64) -> Self {
        Self {
            dependence,
            events: 0,
            kernel_sum: 0.0,
            at: origin,
            last: origin,
        }
    }

    /// Effect at `t` (later than every recorded event), counting only
    /// events strictly before `t`.
    fn effect(&self, t: f64) -> f64 {
        match self.dependence {
            Dependence::None => 0.0,
            Dependence::Constant(zeta) => zeta * (self.events as f64 + 1.0).ln(),
            Dependence::Transient(psi) => {
                psi * self.kernel_sum * (-TRANSIENT_DECAY * (t - self.at)).exp()
            }
            Dependence::TransientLast(psi) if self.events > 0 => {
                psi * (-TRANSIENT_DECAY * (t - self.last)).exp()
            }
            Dependence::TransientLast(_) => 0.0,
        }
    }

    /// Moves the walk to `t`, recording an event there if `event`.
    fn advance(&mut self, t: f64, event: bool) {
        if matches!(self.dependence, Dependence::Transient(_)) {
            self.kernel_sum *= (-TRANSIENT_DECAY * (t - self.at)).exp();
        }
        self.at = t;
        if event {
            self.events += 1;
            self.kernel_sum += 1.0;
            self.last = t;
        }
    }

    /// Supremum of the effect from the current position onwards.
    fn forward_bound(&self) -> f64 {
        match self.dependence {
            Dependence::Transient(psi) if psi > 0.0 => psi * self.kernel_sum,
            Dependence::TransientLast(psi) if psi > 0.0 && self.events > 0 => {
                psi * (-TRANSIENT_DECAY * (self.at - self.last)).exp()
            }
            Dependence::Transient(_) | Dependence::TransientLast(_) | Dependence::None => 0.0,
            Dependence::Constant(zeta) => zeta * (self.events as f64 + 1.0).ln(),
        }
    }
}

/// How the thinning bound is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EnvelopeRule {
    /// A constant per event count: `t_sup = end_time` if k > 1 else the
    /// thinning origin, the positive part of the treatment effect, and
    /// `zeta ln j` or `(j - 1) psi` for positive dependence.
    PerCount,
    /// Re-bounded from the current candidate after every step. Samples the
    /// same process far faster when positive transient dependence makes the
    /// per-count bound grow geometrically with the event count.
    #[default]
    Adaptive,
}

/// Per-person outcome intensity
/// `k t^(k-1) w exp(beta0 + beta P(t) + E(t) + 0.5 x + 0.5 z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeIntensity {
    pub k: f64,
    pub frailty: f64,
    pub beta0: f64,
    pub log_hr: f64,
    pub x: f64,
    pub z: f64,
    pub treatment_time: Option<f64>,
    pub end_time: f64,
    pub dependence: Dependence,
}

impl OutcomeIntensity {
    fn validate(&self) -> Result<(), SimError> {
        if !(self.k > 0.0) {
            return Err(SimError::InvalidParameter("k must be positive"));
        }
        if !(self.frailty > 0.0) {
            return Err(SimError::InvalidParameter("frailty must be positive"));
        }
        if !(self.end_time > 0.0) {
            return Err(SimError::InvalidParameter("end_time must be positive"));
        }
        Ok(())
    }

    fn on_treatment(&self, t: f64) -> bool {
        matches!(self.treatment_time, Some(trt) if trt < t && t <= self.end_time)
    }

    pub fn intensity(&self, t: f64, history: &[f64]) -> f64 {
        self.intensity_given_effect(t, dependence_effect(history, t, self.dependence))
    }

    fn intensity_given_effect(&self, t: f64, effect: f64) -> f64 {
        let treated = if self.on_treatment(t) { self.log_hr } else { 0.0 };
        let linear = self.beta0 + treated + effect + 0.5 * self.x + 0.5 * self.z;
        self.k * t.powf(self.k - 1.0) * self.frailty * linear.exp()
    }

    /// [`EnvelopeRule::PerCount`] bound while the person has `prior_events` events.
    pub fn envelope(&self, prior_events: usize) -> f64 {
        let t_sup = if self.k > 1.0 {
            self.end_time
        } else {
            THINNING_ORIGIN
        };
        let treatment_bound = self.log_hr.max(0.0);
        let j = prior_events as f64 + 1.0;
        // only the latest event acts under TransientLast, so psi bounds it
        let dependence_bound = match self.dependence {
            Dependence::Constant(zeta) if zeta > 0.0 => zeta * j.ln(),
            Dependence::Transient(psi) if psi > 0.0 => (j - 1.0) * psi,
            Dependence::TransientLast(psi) if psi > 0.0 && j > 1.0 => psi,
            _ => 0.0,
        };
        self.k
            * t_sup.powf(self.k - 1.0)
            * self.frailty
            * (self.beta0 + treatment_bound + dependence_bound + 0.5 * self.x + 0.5 * self.z)
                .exp()
    }

    /// Bound on the intensity over `[now, end_time)` given the events so far
    /// (all at or before `now`). Valid until the next event is added: the
    /// transient terms only decay and `t^(k-1)` does not increase for k <= 1.
    pub fn adaptive_envelope(&self, now: f64, history: &[f64]) -> f64 {
        let mut state = DependenceState::new(self.dependence, history.first().copied().unwrap_or(now));
        for &t in history {
            state.advance(t, true);
        }
        state.advance(now, false);
        self.adaptive_bound(now, &state)
    }

    fn adaptive_bound(&self, now: f64, state: &DependenceState) -> f64 {
        let t_sup = if self.k > 1.0 { self.end_time } else { now };
        let treatment_bound = if self.treatment_time.is_some() {
            self.log_hr.max(0.0)
        } else {
            0.0
        };
        self.k
            * t_sup.powf(self.k - 1.0)
            * self.frailty
            * (self.beta0 + treatment_bound + state.forward_bound() + 0.5 * self.x + 0.5 * self.z)
                .exp()
    }

    /// Event times on `(0, end_time)` by thinning with the adaptive envelope.
    pub fn simulate<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<f64>, SimError> {
        self.simulate_with(EnvelopeRule::Adaptive, rng)
    }

    /// Event times on `(0, end_time)` by thinning. Every candidate is checked
    /// against the envelope in force and a violation is an error.
    pub fn simulate_with<R: Rng + ?Sized>(
        &self,
        rule: EnvelopeRule,
        rng: &mut R,
    ) -> Result<Vec<f64>, SimError> {
        self.validate()?;
        let mut events = Vec::new();
        let mut candidate = THINNING_ORIGIN;
        let mut state = DependenceState::new(self.dependence, candidate);
        let mut bound = match rule {
            EnvelopeRule::PerCount => self.envelope(0),
            EnvelopeRule::Adaptive => self.adaptive_bound(candidate, &state),
        };
        loop {
            let gap: f64 = Exp1.sample(rng);
            candidate += gap / bound;
            if candidate >= self.end_time {
                break;
            }
            let intensity = self.intensity_given_effect(candidate, state.effect(candidate));
            if intensity > bound * (1.0 + 1e-12) {
                return Err(SimError::EnvelopeViolation {
                    time: candidate,
                    intensity,
                    bound,
                    prior_events: events.len(),
                });
            }
            let v: f64 = rng.random();
            let accepted = v <= intensity / bound;
            if accepted {
                events.push(candidate);
                if events.len() > MAX_EVENTS_PER_SUBJECT {
                    return Err(SimError::Runaway(MAX_EVENTS_PER_SUBJECT));
                }
            }
            state.advance(candidate, accepted);
            bound = match rule {
                EnvelopeRule::PerCount if accepted => self.envelope(events.len()),
                EnvelopeRule::PerCount => bound,
                EnvelopeRule::Adaptive => self.adaptive_bound(candidate, &state),
            };
            if !bound.is_finite() {
                return Err(SimError::Runaway(events.len()));
            }
        }
        Ok(events)
    }
}

/// Simulates one pre-match cohort for a replicate. Streams are keyed by
/// `(master_seed, replicate_index)`.
pub fn simulate_cohort(
    config: &ScenarioConfig,
    replicate_index: u64,
) -> Result<Vec<SubjectRecord>, SimError> {
    config.validate()?;
    let mut rng = replicate_rng(config.master_seed, replicate_index, StreamPurpose::Cohort);
    let (a, b) = config.tau_range;
    let width = (config.n_pre_match as f64).log10().ceil().max(1.0) as usize;
    let mut subjects = Vec::with_capacity(config.n_pre_match);
    for i in 0..config.n_pre_match {
        let tau = a + (b - a) * rng.random::<f64>();
        let x = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
        let z = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
        let u = draw_frailty(config.u_variance, &mut rng)?;
        let w = draw_frailty(config.sigma_omega_sq, &mut rng)?;
        let t_trt = draw_treatment_time(x, z, u, config.c0, &mut rng)?;
        let treatment_time = (t_trt < tau && t_trt > 0.0).then_some(t_trt);
        let intensity = OutcomeIntensity {
            k: config.k,
            frailty: w,
            beta0: config.beta0,
            log_hr: config.log_hr,
            x,
            z,
            treatment_time,
            end_time: tau,
            dependence: config.dependence,
        };
        let events = intensity.simulate(&mut rng)?;
        let mut record = SubjectRecord::new(format!("s{:0width$}", i + 1, width = width), tau)
            .with_events(events)
            .with_covariate("x", x as u8)
            .with_covariate("z", z as u8);
        record.treatment_time = treatment_time;
        subjects.push(record);
    }
    Ok(subjects)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::validate_subject;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn moments(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, var)
    }

    // Gamma(shape a = 1/v, scale v): mean 1, variance v, and
    // Var(sample variance) ~ (mu4 - v^2)/n with mu4 = 3v^2 + 6v^3.
    fn check_gamma_moments(variance: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| draw_frailty(variance, &mut rng).unwrap())
            .collect();
        let (mean, var) = moments(&draws);
        let se_mean = (variance / n as f64).sqrt();
        let mu4 = 3.0 * variance.powi(2) + 6.0 * variance.powi(3);
        let se_var = ((mu4 - variance.powi(2)) / n as f64).sqrt();
        assert!((mean - 1.0).abs() < 3.0 * se_mean, "mean {mean}");
        assert!((var - variance).abs() < 3.0 * se_var, "var {var}");
    }

    #[test]
    fn frailty_moments() {
        check_gamma_moments(0.5);
        check_gamma_moments(0.1);
    }

    #[test]
    fn frailty_degenerate_and_invalid() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(draw_frailty(0.0, &mut rng).unwrap(), 1.0);
        assert!(matches!(
            draw_frailty(-0.1, &mut rng),
            Err(SimError::NegativeVariance(_))
        ));
    }

    #[test]
    fn treatment_time_inversion() {
        let t = treatment_time_from_exponential(1.0, 0.0, 0.0, 1.0, -2.0);
        assert!((t - 2.0f64.exp().powi(2)).abs() < 1e-9);
        assert!((t - 54.598_150_033).abs() < 1e-6);
        assert_eq!(treatment_time_from_exponential(0.0, 1.0, 1.0, 0.7, -2.0), 0.0);
    }

    #[test]
    fn dependence_effects() {
        let c = dependence_effect(&[0.3], 1.0, Dependence::Constant(1.0));
        assert!((c - 2.0f64.ln()).abs() < 1e-12);
        for dep in [
            Dependence::None,
            Dependence::Constant(1.0),
            Dependence::Transient(-1.0),
        ] {
            assert_eq!(dependence_effect(&[], 2.0, dep), 0.0);
        }
        let t = dependence_effect(&[0.5], 1.5, Dependence::Transient(-1.0));
        assert!((t + (-0.5f64).exp()).abs() < 1e-12);
        assert!((t + 0.606_530_659_7).abs() < 1e-9);
        // events at or after t are not history yet
        assert_eq!(dependence_effect(&[1.5], 1.5, Dependence::Constant(1.0)), 0.0);
    }

    #[test]
    fn homogeneous_poisson_counts() {
        let intensity = OutcomeIntensity {
            k: 1.0,
            frailty: 1.0,
            beta0: 2.0f64.ln(),
            log_hr: 0.0,
            x: 0.0,
            z: 0.0,
            treatment_time: None,
            end_time: 1.0,
            dependence: Dependence::None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 10_000;
        let counts: Vec<f64> = (0..n)
            .map(|_| intensity.simulate(&mut rng).unwrap().len() as f64)
            .collect();
        let (mean, var) = moments(&counts);
        // observed window is (0.001, 1), rate 2
        let mu = 2.0 * (1.0 - THINNING_ORIGIN);
        let se_mean = (mu / n as f64).sqrt();
        // Poisson: Var(s^2) ~ (mu + 2 mu^2) / n
        let se_var = ((mu + 2.0 * mu * mu) / n as f64).sqrt();
        assert!((mean - mu).abs() < 3.0 * se_mean, "mean {mean}");
        assert!((var - mu).abs() < 3.0 * se_var, "var {var}");
    }

    #[test]
    fn zero_effect_makes_treatment_inert() {
        let base = OutcomeIntensity {
            k: 0.8,
            frailty: 1.3,
            beta0: 0.2,
            log_hr: 0.0,
            x: 1.0,
            z: 0.0,
            treatment_time: None,
            end_time: 2.5,
            dependence: Dependence::None,
        };
        let treated = OutcomeIntensity {
            treatment_time: Some(0.7),
            ..base.clone()
        };
        for seed in 0..50 {
            let a = base.simulate(&mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let b = treated
                .simulate(&mut ChaCha8Rng::seed_from_u64(seed))
                .unwrap();
            assert_eq!(a, b);
        }
    }

    fn count_summary(intensity: &OutcomeIntensity, rule: EnvelopeRule, seed: u64, n: usize) -> (f64, f64, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut counts = Vec::with_capacity(n);
        let mut first = Vec::new();
        for _ in 0..n {
            let events = intensity.simulate_with(rule, &mut rng).unwrap();
            if let Some(&t) = events.first() {
                first.push(t);
            }
            counts.push(events.len() as f64);
        }
        let (mean, var) = moments(&counts);
        (mean, var, first.iter().sum::<f64>() / first.len() as f64)
    }

    #[test]
    fn envelope_rules_sample_the_same_process() {
        let cases = [
            (0.8, Dependence::Transient(0.2), Some(0.6)),
            (1.2, Dependence::Constant(1.0), None),
            (1.0, Dependence::Transient(-1.0), Some(1.0)),
            (0.8, Dependence::TransientLast(1.0), Some(0.6)),
        ];
        let n = 6000;
        for (k, dependence, treatment_time) in cases {
            let intensity = OutcomeIntensity {
                k,
                frailty: 1.0,
                beta0: -1.5,
                log_hr: 2.0f64.ln(),
                x: 1.0,
                z: 0.0,
                treatment_time,
                end_time: 2.0,
                dependence,
            };
            let (m1, v1, f1) = count_summary(&intensity, EnvelopeRule::PerCount, 1, n);
            let (m2, v2, f2) = count_summary(&intensity, EnvelopeRule::Adaptive, 2, n);
            let se = ((v1 + v2) / n as f64).sqrt();
            assert!((m1 - m2).abs() < 4.0 * se, "{dependence:?}: means {m1} vs {m2}");
            assert!((v1 / v2 - 1.0).abs() < 0.15, "{dependence:?}: variances {v1} vs {v2}");
            assert!((f1 - f2).abs() < 0.05, "{dependence:?}: first event {f1} vs {f2}");
        }
    }

    #[test]
    fn running_state_matches_history_scan() {
        let history = [0.2, 0.35, 0.9, 1.4, 1.41, 2.7];
        for dependence in [
            Dependence::None,
            Dependence::Constant(-1.0),
            Dependence::Transient(1.0),
            Dependence::Transient(-0.4),
            Dependence::TransientLast(1.0),
        ] {
            let mut state = DependenceState::new(dependence, THINNING_ORIGIN);
            let mut recorded = 0;
            for step in 1..60 {
                let t = step as f64 * 0.05;
                while recorded < history.len() && history[recorded] < t {
                    state.advance(history[recorded], true);
                    recorded += 1;
                }
                let expected = dependence_effect(&history, t, dependence);
                assert!((state.effect(t) - expected).abs() < 1e-12, "{dependence:?} at {t}");
                state.advance(t, false);
            }
        }
    }

    #[test]
    fn envelope_matches_intensity_sup() {
        // constant positive dependence: bound is attained as t -> t_sup
        let p = OutcomeIntensity {
            k: 1.2,
            frailty: 1.0,
            beta0: 0.0,
            log_hr: 0.5,
            x: 0.0,
            z: 1.0,
            treatment_time: Some(0.5),
            end_time: 2.0,
            dependence: Dependence::Constant(1.0),
        };
        let at_end = p.intensity(2.0, &[0.1, 0.2]);
        assert!((at_end - p.envelope(2)).abs() < 1e-12 * at_end);
    }

    #[test]
    fn cohort_is_deterministic_and_valid() {
        let config = ScenarioConfig {
            n_pre_match: 600,
            ..ScenarioConfig::default()
        };
        let a = simulate_cohort(&config, 3).unwrap();
        let b = simulate_cohort(&config, 3).unwrap();
        assert_eq!(a.len(), 600);
        assert_eq!(a, b);
        for s in &a {
            assert!(s.end_time > 1.0 && s.end_time < 3.0);
            validate_subject(s.clone()).unwrap();
        }
        let c = simulate_cohort(&config, 4).unwrap();
        assert_ne!(a, c);
    }
}
