//! PERR analysis dataset construction: 1:1 risk-set matching, index dates,
//! prior/post periods and counting-process expansion with event strata.

use rand::Rng;
use thiserror::Error;

pub use crate::types::PoolingBasis;
use crate::types::{CountingRow, SubjectRecord};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CohortError {
    #[error("no treated subjects to match")]
    NoTreated,
    #[error("subject {id} has no value for matching key {key}")]
    MissingKey { id: String, key: String },
    #[error("restriction window must be positive (got {0})")]
    BadWindow(f64),
    #[error("index time {index} is not inside the follow-up ({entry}, {end}) of subject {id}")]
    IndexOutsideFollowUp {
        id: String,
        index: f64,
        entry: f64,
        end: f64,
    },
    #[error("pair references subject index {0} outside the cohort")]
    UnknownSubject(usize),
    #[error("rate table cell ({group}, {period}) has zero person-time")]
    ZeroPersonTime {
        group: &'static str,
        period: &'static str,
    },
    #[error("pooling percentile must lie in (0, 1] (got {0})")]
    BadPercentile(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchedPair {
    /// Index into the subject slice.
    pub treated: usize,
    pub control: usize,
    pub index_time: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchOutcome {
    pub pairs: Vec<MatchedPair>,
    /// Treated subjects left without an eligible control.
    pub unmatched: Vec<String>,
    /// Treated subjects with no prior exposure (treated at entry).
    pub no_prior: Vec<String>,
}

/// 1:1 risk-set matching on exact key values.
///
/// Treated subjects are processed in order of treatment time; each takes a
/// uniformly random unused never-treated control that shares its key values
/// and is still under follow-up at the treatment time.
pub fn match_cohort<R: Rng + ?Sized>(
    subjects: &[SubjectRecord],
    keys: &[&str],
    rng: &mut R,
) -> Result<MatchOutcome, CohortError> {
    let key_of = |s: &SubjectRecord| -> Result<Vec<String>, CohortError> {
        keys.iter()
            .map(|&k| {
                s.covariates
                    .get(k)
                    .map(|v| v.trim().to_string())
                    .filter(|v| !v.is_empty())
                    .ok_or_else(|| CohortError::MissingKey {
                        id: s.id.clone(),
                        key: k.to_string(),
                    })
            })
            .collect()
    };
    let key_values = subjects.iter().map(key_of).collect::<Result<Vec<_>, _>>()?;

    let mut outcome = MatchOutcome::default();
    let mut treated: Vec<usize> = Vec::new();
    for (i, s) in subjects.iter().enumerate() {
        if let Some(t) = s.treatment_time {
            if t <= s.entry_time {
                log::warn!("subject {} treated at entry; excluded from matching", s.id);
                outcome.no_prior.push(s.id.clone());
            } else {
                treated.push(i);
            }
        }
    }
    if treated.is_empty() {
        return Err(CohortError::NoTreated);
    }
    let by_time = |a: &usize, b: &usize, time: &dyn Fn(usize) -> f64| {
        time(*a)
            .total_cmp(&time(*b))
            .then_with(|| subjects[*a].id.cmp(&subjects[*b].id))
    };
    let trt_time = |i: usize| subjects[i].treatment_time.unwrap_or(f64::INFINITY);
    let end_time = |i: usize| subjects[i].end_time;
    treated.sort_by(|a, b| by_time(a, b, &trt_time));
    let mut controls: Vec<usize> = (0..subjects.len())
        .filter(|&i| !subjects[i].is_treated())
        .collect();
    controls.sort_by(|a, b| by_time(a, b, &end_time));

    let mut used = vec![false; controls.len()];
    let mut candidates = Vec::new();
    for &t in &treated {
        let index_time = trt_time(t);
        candidates.clear();
        candidates.extend(controls.iter().enumerate().filter_map(|(slot, &c)| {
            let s = &subjects[c];
            let eligible = !used[slot]
                && key_values[c] == key_values[t]
                && s.end_time > index_time
                && s.entry_time < index_time;
            eligible.then_some(slot)
        }));
        if candidates.is_empty() {
            log::debug!(
                "treated subject {} has no eligible control; dropped",
                subjects[t].id
            );
            outcome.unmatched.push(subjects[t].id.clone());
            continue;
        }
        let slot = candidates[rng.random_range(0..candidates.len())];
        used[slot] = true;
        outcome.pairs.push(MatchedPair {
            treated: t,
            control: controls[slot],
            index_time,
        });
    }
    Ok(outcome)
}

/// Prior and post windows `(lo, hi]` of one subject.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Periods {
    pub prior: (f64, f64),
    pub post: (f64, f64),
}

impl Periods {
    pub fn length(&self) -> f64 {
        (self.prior.1 - self.prior.0) + (self.post.1 - self.post.0)
    }
}

/// Splits one subject's follow-up at the index time, optionally restricted to
/// `window` on each side. The time origin is kept.
pub fn split_periods(
    subject: &SubjectRecord,
    index_time: f64,
    window: Option<f64>,
) -> Result<Periods, CohortError> {
    if let Some(w) = window {
        if !(w > 0.0) {
            return Err(CohortError::BadWindow(w));
        }
    }
    let (entry, end) = (subject.entry_time, subject.end_time);
    if !(index_time > entry && index_time < end) {
        return Err(CohortError::IndexOutsideFollowUp {
            id: subject.id.clone(),
            index: index_time,
            entry,
            end,
        });
    }
    let (lo, hi) = match window {
        Some(w) => (entry.max(index_time - w), end.min(index_time + w)),
        None => (entry, end),
    };
    Ok(Periods {
        prior: (lo, index_time),
        post: (index_time, hi),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RowOptions {
    pub window: Option<f64>,
    pub stratify: bool,
    pub pooling_percentile: f64,
    pub pooling_basis: PoolingBasis,
    /// Restart the event-number strata at the index date instead of
    /// accumulating from the start of the analysed follow-up.
    pub reset_strata_at_index: bool,
}

impl Default for RowOptions {
    fn default() -> Self {
        Self {
            window: None,
            stratify: false,
            pooling_percentile: 0.95,
            pooling_basis: PoolingBasis::Events,
            reset_strata_at_index: false,
        }
    }
}

/// Counting-process data for a matched cohort.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisCohort {
    pub rows: Vec<CountingRow>,
    /// Original subject id for each `subject_id` used in `rows`.
    pub subject_ids: Vec<String>,
    pub analyzed_events: Vec<usize>,
    pub periods: Vec<Periods>,
    /// Highest stratum after pooling, when stratified.
    pub pooled_stratum: Option<u32>,
}

impl AnalysisCohort {
    pub fn n_subjects(&self) -> usize {
        self.subject_ids.len()
    }

    pub fn n_events(&self) -> usize {
        self.analyzed_events.iter().sum()
    }
}

pub const PERR_COVARIATES: [&str; 3] = ["trt", "post", "trt_x_post"];

/// Nearest-rank percentile of nonnegative counts.
pub fn count_percentile(counts: &[usize], p: f64) -> usize {
    if counts.is_empty() {
        return 0;
    }
    let mut sorted = counts.to_vec();
    sorted.sort_unstable();
    let rank = (p * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Expands matched pairs into counting-process rows with covariates
/// `[trt, post, trt * post]`. Subject `2p` is the treated member of pair
/// `p` and `2p + 1` its control; cluster ids equal subject ids.
pub fn build_counting_rows(
    subjects: &[SubjectRecord],
    pairs: &[MatchedPair],
    options: &RowOptions,
) -> Result<AnalysisCohort, CohortError> {
    if !(options.pooling_percentile > 0.0 && options.pooling_percentile <= 1.0) {
        return Err(CohortError::BadPercentile(options.pooling_percentile));
    }
    let mut members = Vec::with_capacity(pairs.len() * 2);
    for pair in pairs {
        for (index, treated) in [(pair.treated, true), (pair.control, false)] {
            let subject = subjects
                .get(index)
                .ok_or(CohortError::UnknownSubject(index))?;
            let periods = split_periods(subject, pair.index_time, options.window)?;
            members.push((subject, treated, periods));
        }
    }
    let analyzed_events: Vec<usize> = members
        .iter()
        .map(|(s, _, p)| s.events_in(p.prior.0, p.prior.1) + s.events_in(p.post.0, p.post.1))
        .collect();
    let pooled_stratum = options.stratify.then(|| {
        let cap = match options.pooling_basis {
            PoolingBasis::Persons => count_percentile(&analyzed_events, options.pooling_percentile),
            PoolingBasis::Events => {
                let sequence: Vec<usize> = analyzed_events.iter().flat_map(|&n| 1..=n).collect();
                count_percentile(&sequence, options.pooling_percentile)
            }
        };
        cap.max(1) as u32
    });

    let mut rows = Vec::new();
    for (id, (subject, treated, periods)) in members.iter().enumerate() {
        let trt = if *treated { 1.0 } else { 0.0 };
        let mut prior_events = 0usize;
        for (post, (lo, hi)) in [(0.0, periods.prior), (1.0, periods.post)] {
            if options.reset_strata_at_index && post == 1.0 {
                prior_events = 0;
            }
            let mut start = lo;
            let inside = subject.event_times.iter().filter(|&&t| t > lo && t <= hi);
            for &event in inside {
                rows.push(CountingRow {
                    subject_id: id,
                    cluster_id: id,
                    stratum_id: stratum(prior_events, pooled_stratum),
                    start,
                    stop: event,
                    status: true,
                    covariates: vec![trt, post, trt * post],
                });
                prior_events += 1;
                start = event;
            }
            if start < hi {
                rows.push(CountingRow {
                    subject_id: id,
                    cluster_id: id,
                    stratum_id: stratum(prior_events, pooled_stratum),
                    start,
                    stop: hi,
                    status: false,
                    covariates: vec![trt, post, trt * post],
                });
            }
        }
    }
    Ok(AnalysisCohort {
        rows,
        subject_ids: members.iter().map(|(s, _, _)| s.id.clone()).collect(),
        analyzed_events,
        periods: members.iter().map(|(_, _, p)| *p).collect(),
        pooled_stratum,
    })
}

fn stratum(prior_events: usize, pooled: Option<u32>) -> u32 {
    match pooled {
        Some(cap) => (prior_events as u32 + 1).min(cap),
        None => 0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RateCell {
    pub events: usize,
    pub person_time: f64,
    pub rate: f64,
}

impl RateCell {
    pub fn new(events: usize, person_time: f64) -> Self {
        let rate = if person_time > 0.0 {
            events as f64 / person_time
        } else {
            f64::NAN
        };
        Self {
            events,
            person_time,
            rate,
        }
    }
}

/// Events, person-time and rate by group (treated/control) and period
/// (prior/post).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateTable {
    pub treated_prior: RateCell,
    pub treated_post: RateCell,
    pub control_prior: RateCell,
    pub control_post: RateCell,
}

impl RateTable {
    /// Rates with person-time divided by `per` (e.g. 365.25 for days to years).
    pub fn rescaled(&self, per: f64) -> RateTable {
        let f = |c: RateCell| RateCell::new(c.events, c.person_time / per);
        RateTable {
            treated_prior: f(self.treated_prior),
            treated_post: f(self.treated_post),
            control_prior: f(self.control_prior),
            control_post: f(self.control_post),
        }
    }

    pub fn crude_perr(&self) -> f64 {
        (self.treated_post.rate / self.control_post.rate)
            / (self.treated_prior.rate / self.control_prior.rate)
    }
}

/// Aggregates PERR rows (covariates `[trt, post, ...]`) into a 2x2 rate table.
pub fn rate_table(rows: &[CountingRow]) -> Result<RateTable, CohortError> {
    let mut events = [[0usize; 2]; 2];
    let mut time = [[0.0f64; 2]; 2];
    for row in rows {
        let g = usize::from(row.covariates.first().copied().unwrap_or(0.0) != 0.0);
        let p = usize::from(row.covariates.get(1).copied().unwrap_or(0.0) != 0.0);
        events[g][p] += usize::from(row.status);
        time[g][p] += row.stop - row.start;
    }
    let labels = [["control", "treated"], ["prior", "post"]];
    for g in 0..2 {
        for p in 0..2 {
            if !(time[g][p] > 0.0) {
                return Err(CohortError::ZeroPersonTime {
                    group: labels[0][g],
                    period: labels[1][p],
                });
            }
        }
    }
    Ok(RateTable {
        treated_prior: RateCell::new(events[1][0], time[1][0]),
        treated_post: RateCell::new(events[1][1], time[1][1]),
        control_prior: RateCell::new(events[0][0], time[0][0]),
        control_post: RateCell::new(events[0][1], time[0][1]),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(9)
    }

    #[test]
    fn eligibility_forces_late_control() {
        let subjects = vec![
            SubjectRecord::new("A", 3.0)
                .with_treatment(1.0)
                .with_covariate("z", 1),
            SubjectRecord::new("C1", 0.5).with_covariate("z", 1),
            SubjectRecord::new("C2", 2.0).with_covariate("z", 1),
        ];
        let out = match_cohort(&subjects, &["z"], &mut rng()).unwrap();
        assert_eq!(
            out.pairs,
            vec![MatchedPair {
                treated: 0,
                control: 2,
                index_time: 1.0
            }]
        );
    }

    #[test]
    fn key_mismatch_drops_treated() {
        let subjects = vec![
            SubjectRecord::new("A", 3.0)
                .with_treatment(1.0)
                .with_covariate("z", 1),
            SubjectRecord::new("C", 2.0).with_covariate("z", 0),
        ];
        let out = match_cohort(&subjects, &["z"], &mut rng()).unwrap();
        assert!(out.pairs.is_empty());
        assert_eq!(out.unmatched, vec!["A".to_string()]);
    }

    #[test]
    fn matching_errors() {
        let subjects = vec![SubjectRecord::new("C", 2.0).with_covariate("z", 0)];
        assert_eq!(
            match_cohort(&subjects, &["z"], &mut rng()),
            Err(CohortError::NoTreated)
        );
        let subjects = vec![SubjectRecord::new("A", 2.0).with_treatment(1.0)];
        assert!(matches!(
            match_cohort(&subjects, &["z"], &mut rng()),
            Err(CohortError::MissingKey { .. })
        ));
    }

    #[test]
    fn controls_used_once_and_choice_is_random() {
        let mut subjects = vec![
            SubjectRecord::new("T1", 5.0).with_treatment(1.0),
            SubjectRecord::new("T2", 5.0).with_treatment(2.0),
        ];
        for i in 0..6 {
            subjects.push(SubjectRecord::new(format!("C{i}"), 4.0));
        }
        let mut seen = std::collections::BTreeSet::new();
        for seed in 0..40 {
            let out = match_cohort(&subjects, &[], &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert_eq!(out.pairs.len(), 2);
            assert_ne!(out.pairs[0].control, out.pairs[1].control);
            seen.insert(out.pairs[0].control);
        }
        assert!(seen.len() > 3, "control choice should vary with the seed");
    }

    #[test]
    fn period_arithmetic() {
        let s = SubjectRecord::new("a", 150.0);
        let p = split_periods(&s, 100.0, Some(70.0)).unwrap();
        assert_eq!(p.prior, (30.0, 100.0));
        assert_eq!(p.post, (100.0, 150.0));
        let s = SubjectRecord::new("b", 2.5);
        let p = split_periods(&s, 1.2, None).unwrap();
        assert_eq!(p.prior, (0.0, 1.2));
        assert_eq!(p.post, (1.2, 2.5));
        let s = SubjectRecord::new("c", 300.0);
        let p = split_periods(&s, 100.0, Some(70.0)).unwrap();
        assert_eq!(p.post, (100.0, 170.0));
        assert_eq!(
            split_periods(&s, 100.0, Some(0.0)),
            Err(CohortError::BadWindow(0.0))
        );
        assert!(split_periods(&s, 300.0, None).is_err());
    }

    fn single_pair(treated: SubjectRecord, control: SubjectRecord, index: f64) -> (Vec<SubjectRecord>, Vec<MatchedPair>) {
        (
            vec![treated, control],
            vec![MatchedPair {
                treated: 0,
                control: 1,
                index_time: index,
            }],
        )
    }

    #[test]
    fn segmentation_rule() {
        let (subjects, pairs) = single_pair(
            SubjectRecord::new("t", 300.0)
                .with_treatment(100.0)
                .with_events(vec![10.0, 40.0, 120.0, 200.0]),
            SubjectRecord::new("c", 250.0),
            100.0,
        );
        let options = RowOptions {
            window: Some(70.0),
            ..RowOptions::default()
        };
        let cohort = build_counting_rows(&subjects, &pairs, &options).unwrap();
        let treated: Vec<_> = cohort
            .rows
            .iter()
            .filter(|r| r.subject_id == 0)
            .map(|r| (r.start, r.stop, r.status, r.covariates.clone()))
            .collect();
        assert_eq!(
            treated,
            vec![
                (30.0, 40.0, true, vec![1.0, 0.0, 0.0]),
                (40.0, 100.0, false, vec![1.0, 0.0, 0.0]),
                (100.0, 120.0, true, vec![1.0, 1.0, 1.0]),
                (120.0, 170.0, false, vec![1.0, 1.0, 1.0]),
            ]
        );
        let control: Vec<_> = cohort
            .rows
            .iter()
            .filter(|r| r.subject_id == 1)
            .map(|r| (r.start, r.stop, r.status))
            .collect();
        assert_eq!(control, vec![(30.0, 100.0, false), (100.0, 170.0, false)]);
        assert_eq!(cohort.analyzed_events, vec![2, 0]);
    }

    #[test]
    fn strata_accumulate_and_pool() {
        let (subjects, pairs) = single_pair(
            SubjectRecord::new("t", 10.0)
                .with_treatment(5.0)
                .with_events(vec![1.0, 2.0, 6.0, 7.0, 8.0]),
            SubjectRecord::new("c", 10.0).with_events(vec![3.0, 4.0, 9.0]),
            5.0,
        );
        // counts {5, 3}; nearest-rank 50th percentile = 3
        let options = RowOptions {
            stratify: true,
            pooling_percentile: 0.5,
            pooling_basis: PoolingBasis::Persons,
            ..RowOptions::default()
        };
        let cohort = build_counting_rows(&subjects, &pairs, &options).unwrap();
        assert_eq!(cohort.pooled_stratum, Some(3));
        let strata: Vec<u32> = cohort
            .rows
            .iter()
            .filter(|r| r.subject_id == 0)
            .map(|r| r.stratum_id)
            .collect();
        // rows end at 1, 2, 5(index), 6, 7, 8, 10
        assert_eq!(strata, vec![1, 2, 3, 3, 3, 3, 3]);

        let reset = RowOptions {
            reset_strata_at_index: true,
            ..options
        };
        let cohort = build_counting_rows(&subjects, &pairs, &reset).unwrap();
        let strata: Vec<u32> = cohort
            .rows
            .iter()
            .filter(|r| r.subject_id == 0)
            .map(|r| r.stratum_id)
            .collect();
        assert_eq!(strata, vec![1, 2, 3, 1, 2, 3, 3]);
    }

    #[test]
    fn event_basis_ranks_sequence_numbers() {
        let (subjects, pairs) = single_pair(
            SubjectRecord::new("t", 10.0)
                .with_treatment(5.0)
                .with_events(vec![1.0, 2.0, 6.0, 7.0, 8.0]),
            SubjectRecord::new("c", 10.0).with_events(vec![3.0, 4.0, 9.0]),
            5.0,
        );
        // sequence numbers {1, 1, 2, 2, 3, 3, 4, 5}
        let mut options = RowOptions {
            stratify: true,
            pooling_percentile: 0.5,
            ..RowOptions::default()
        };
        assert_eq!(options.pooling_basis, PoolingBasis::Events);
        let cohort = build_counting_rows(&subjects, &pairs, &options).unwrap();
        assert_eq!(cohort.pooled_stratum, Some(2));
        let strata: Vec<u32> = cohort
            .rows
            .iter()
            .filter(|r| r.subject_id == 0)
            .map(|r| r.stratum_id)
            .collect();
        assert_eq!(strata, vec![1, 2, 2, 2, 2, 2, 2]);
        options.pooling_percentile = 0.95;
        let cohort = build_counting_rows(&subjects, &pairs, &options).unwrap();
        assert_eq!(cohort.pooled_stratum, Some(5));
    }

    #[test]
    fn no_events_still_gives_one_stratum() {
        let (subjects, pairs) = single_pair(
            SubjectRecord::new("t", 3.0).with_treatment(1.0),
            SubjectRecord::new("c", 2.0),
            1.0,
        );
        let options = RowOptions {
            stratify: true,
            ..RowOptions::default()
        };
        let cohort = build_counting_rows(&subjects, &pairs, &options).unwrap();
        assert_eq!(cohort.pooled_stratum, Some(1));
        assert!(cohort.rows.iter().all(|r| r.stratum_id == 1));
    }

    #[test]
    fn third_event_with_p95_three_lands_in_stratum_three() {
        assert_eq!(stratum(2, Some(3)), 3);
        assert_eq!(stratum(7, Some(3)), 3);
        assert_eq!(stratum(0, Some(3)), 1);
        assert_eq!(stratum(4, None), 0);
    }

    #[test]
    fn zero_event_subject_gives_two_rows() {
        let (subjects, pairs) = single_pair(
            SubjectRecord::new("t", 3.0).with_treatment(1.0),
            SubjectRecord::new("c", 2.0),
            1.0,
        );
        let cohort = build_counting_rows(&subjects, &pairs, &RowOptions::default()).unwrap();
        let rows: Vec<_> = cohort.rows.iter().filter(|r| r.subject_id == 0).collect();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| !r.status));
    }

    #[test]
    fn rate_cells() {
        let cell = RateCell::new(108, 26.1);
        assert!((cell.rate - 4.138).abs() < 5e-4);
        let cell = RateCell::new(22, 33.7);
        assert!((cell.rate - 0.653).abs() < 5e-4);
        assert_eq!(RateCell::new(0, 3.0).rate, 0.0);
    }

    #[test]
    fn rate_table_from_rows() {
        let (subjects, pairs) = single_pair(
            SubjectRecord::new("t", 4.0)
                .with_treatment(2.0)
                .with_events(vec![1.0, 3.0, 3.5]),
            SubjectRecord::new("c", 3.0).with_events(vec![2.5]),
            2.0,
        );
        let cohort = build_counting_rows(&subjects, &pairs, &RowOptions::default()).unwrap();
        let table = rate_table(&cohort.rows).unwrap();
        assert_eq!(table.treated_prior.events, 1);
        assert_eq!(table.treated_post.events, 2);
        assert_eq!(table.control_prior.events, 0);
        assert_eq!(table.control_post.events, 1);
        assert_eq!(table.treated_post.person_time, 2.0);
        assert_eq!(table.control_post.person_time, 1.0);
        assert_eq!(table.control_prior.rate, 0.0);
        let years = table.rescaled(2.0);
        assert_eq!(years.treated_post.rate, 2.0);
    }

    #[test]
    fn rate_table_rejects_empty_cell() {
        let rows = vec![CountingRow {
            subject_id: 0,
            cluster_id: 0,
            stratum_id: 0,
            start: 0.0,
            stop: 1.0,
            status: true,
            covariates: vec![1.0, 0.0, 0.0],
        }];
        assert!(matches!(
            rate_table(&rows),
            Err(CohortError::ZeroPersonTime { .. })
        ));
    }

    #[test]
    fn percentile_nearest_rank() {
        assert_eq!(count_percentile(&[0, 1, 2, 3, 4, 5, 6, 7, 8, 9], 0.95), 9);
        assert_eq!(count_percentile(&[0, 1, 2, 3, 4, 5, 6, 7, 8, 9], 0.5), 4);
        assert_eq!(count_percentile(&[3], 0.95), 3);
    }
}
