//! HieAvg aggregation and the FedAvg-style benchmark aggregators.
//!
//! Both tiers share one kernel: every participant `n` owns a population
//! weight `base[n]` (`1/J_i` at an edge server, `J_i / ΣJ` at the leader).
//! Timely submissions enter with `base[n]`; a HieAvg straggler enters with
//! `base[n] * γ0 * λ^missed` applied to `last + E[Δ]`; T_FedAvg drops
//! stragglers and renormalises; D_FedAvg reuses the straggler's last real
//! submission at full weight.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{weighted_mean, Topology, WeightVector};

/// Which successive differences feed `E[Δ]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaWindow {
    #[default]
    All,
    LastN(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryEntry {
    pub round: u64,
    pub weights: WeightVector,
    pub estimated: bool,
}

/// Accepted submissions and estimates of one participant.
///
/// The mean difference is a running mean over every stored successive
/// difference. While a participant is absent the mean is frozen at its value
/// from the last real submission, which is also what appending the estimate
/// and recomputing would give; the `r`-th consecutive estimate is therefore
/// exactly `last_real + r * E[Δ]`.
#[derive(Debug, Clone)]
pub struct SubmissionHistory {
    entries: VecDeque<HistoryEntry>,
    cap: Option<usize>,
    window: DeltaWindow,
    diff_sum: Vec<f64>,
    diff_count: usize,
    last_real: Option<WeightVector>,
    frozen_delta: Option<WeightVector>,
    missed: usize,
}

impl Default for SubmissionHistory {
    fn default() -> Self {
        Self::new(DeltaWindow::All, None)
    }
}

impl SubmissionHistory {
    /// `cap` bounds the number of stored vectors; the `All` window is unaffected by it.
    pub fn new(window: DeltaWindow, cap: Option<usize>) -> Self {
        Self {
            entries: VecDeque::new(),
            cap,
            window,
            diff_sum: Vec::new(),
            diff_count: 0,
            last_real: None,
            frozen_delta: None,
            missed: 0,
        }
    }

    /// Builds a history from real submissions at rounds `1..=n`.
    pub fn from_weights(weights: impl IntoIterator<Item = WeightVector>) -> Result<Self> {
        let mut h = Self::default();
        for (r, w) in weights.into_iter().enumerate() {
            h.record(r as u64 + 1, w)?;
        }
        Ok(h)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries ever appended (stored or evicted).
    pub fn total_entries(&self) -> usize {
        if self.entries.is_empty() {
            0
        } else {
            self.diff_count + 1
        }
    }

    pub fn entries(&self) -> impl Iterator<Item = &HistoryEntry> {
        self.entries.iter()
    }

    pub fn last(&self) -> Option<&HistoryEntry> {
        self.entries.back()
    }

    /// Consecutive rounds missed since the last real submission (k' or t').
    pub fn missed_rounds(&self) -> usize {
        self.missed
    }

    pub fn last_real(&self) -> Option<&WeightVector> {
        self.last_real.as_ref()
    }

    fn push(&mut self, round: u64, weights: WeightVector, estimated: bool, diff: Option<&[f64]>) -> Result<()> {
        if let Some(last) = self.entries.back() {
            if round <= last.round {
                return Err(Error::HistoryOrder {
                    last: last.round,
                    next: round,
                });
            }
            if weights.len() != last.weights.len() {
                return Err(Error::Dimension {
                    expected: last.weights.len(),
                    found: weights.len(),
                });
            }
            let diff: Vec<f64> = match diff {
                Some(d) => d.to_vec(),
                None => weights.sub(&last.weights)?.into_inner(),
            };
            if self.diff_sum.is_empty() {
                self.diff_sum = vec![0.0; diff.len()];
            }
            for (s, d) in self.diff_sum.iter_mut().zip(&diff) {
                *s += d;
            }
            self.diff_count += 1;
        }
        self.entries.push_back(HistoryEntry {
            round,
            weights,
            estimated,
        });
        if let Some(cap) = self.cap {
            while self.entries.len() > cap.max(2) {
                self.entries.pop_front();
            }
        }
        Ok(())
    }

    /// Appends a real submission and resets the missed-round counter.
    pub fn record(&mut self, round: u64, weights: WeightVector) -> Result<()> {
        self.push(round, weights.clone(), false, None)?;
        self.last_real = Some(weights);
        self.frozen_delta = None;
        self.missed = 0;
        Ok(())
    }

    /// `E[Δ]` over the configured window.
    pub fn mean_weight_difference(&self) -> Result<WeightVector> {
        if let Some(d) = &self.frozen_delta {
            return Ok(d.clone());
        }
        if self.diff_count == 0 {
            return Err(Error::InsufficientHistory {
                needed: 2,
                have: self.total_entries(),
            });
        }
        match self.window {
            DeltaWindow::All => {
                let inv = 1.0 / self.diff_count as f64;
                WeightVector::new(self.diff_sum.iter().map(|s| s * inv).collect())
            }
            DeltaWindow::LastN(n) => {
                let m = n.max(1).min(self.entries.len() - 1);
                let last = &self.entries[self.entries.len() - 1].weights;
                let first = &self.entries[self.entries.len() - 1 - m].weights;
                last.sub(first)?.scale(1.0 / m as f64)
            }
        }
    }

    /// `last + E[Δ]` for a missed round; the estimate is appended as an
    /// estimated entry and the missed counter advances.
    pub fn estimate_delayed(&mut self, round: u64) -> Result<WeightVector> {
        let delta = self.mean_weight_difference()?;
        let base = self.last_real.clone().ok_or(Error::InsufficientHistory {
            needed: 2,
            have: self.total_entries(),
        })?;
        let steps = (self.missed + 1) as f64;
        let estimate = WeightVector::axpy(steps, &delta, &base)?;
        self.push(round, estimate.clone(), true, Some(delta.as_slice()))?;
        self.frozen_delta = Some(delta);
        self.missed += 1;
        Ok(estimate)
    }
}

/// Geometric decay `γ = γ0 * λ^missed` for estimated contributions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayParams {
    pub gamma0: f64,
    pub lambda: f64,
}

impl Default for DecayParams {
    fn default() -> Self {
        Self {
            gamma0: 0.9,
            lambda: 0.9,
        }
    }
}

impl DecayParams {
    pub fn new(gamma0: f64, lambda: f64) -> Result<Self> {
        let p = Self { gamma0, lambda };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("gamma0", self.gamma0), ("lambda", self.lambda)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Domain(format!("{name} must lie in (0, 1), got {v}")));
            }
        }
        Ok(())
    }

    pub fn factor(&self, missed_rounds: usize) -> Result<f64> {
        if missed_rounds < 1 {
            return Err(Error::Domain("decay needs at least one missed round".into()));
        }
        Ok(self.gamma0 * self.lambda.powi(missed_rounds.min(i32::MAX as usize) as i32))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregator {
    #[default]
    #[serde(rename = "hieavg")]
    HieAvg,
    #[serde(rename = "t_fedavg")]
    TFedAvg,
    #[serde(rename = "d_fedavg")]
    DFedAvg,
    /// HieAvg run under an all-present schedule.
    OracleNoStragglers,
}

impl Aggregator {
    pub const ALL: [Aggregator; 4] = [
        Aggregator::HieAvg,
        Aggregator::TFedAvg,
        Aggregator::DFedAvg,
        Aggregator::OracleNoStragglers,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Aggregator::HieAvg => "hieavg",
            Aggregator::TFedAvg => "t_fedavg",
            Aggregator::DFedAvg => "d_fedavg",
            Aggregator::OracleNoStragglers => "oracle_no_stragglers",
        }
    }
}

impl std::str::FromStr for Aggregator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Aggregator::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::config("aggregator", format!("unknown aggregator `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Timely,
    Estimated,
    Excluded,
}

/// Outcome of one aggregation at either tier.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationReport {
    pub round: u64,
    pub aggregate: WeightVector,
    pub statuses: Vec<Status>,
    /// Final coefficient per participant (0 for excluded ones).
    pub coefficients: Vec<f64>,
    /// Vector entering the sum per participant; `None` when excluded.
    pub inputs: Vec<Option<WeightVector>>,
    /// Sum of the final coefficients.
    pub mass: f64,
}

impl AggregationReport {
    pub fn count(&self, status: Status) -> usize {
        self.statuses.iter().filter(|s| **s == status).count()
    }

    /// Recomputes the aggregate from the recorded inputs and coefficients.
    pub fn replay(&self) -> Result<WeightVector> {
        replay(&self.inputs, &self.coefficients)
    }
}

pub(crate) fn replay(inputs: &[Option<WeightVector>], coefficients: &[f64]) -> Result<WeightVector> {
    let (ws, cs): (Vec<&WeightVector>, Vec<f64>) = inputs
        .iter()
        .zip(coefficients)
        .filter_map(|(w, c)| w.as_ref().map(|w| (w, *c)))
        .unzip();
    weighted_mean(&ws, &cs)
}

/// Population weights: uniform over the devices of one edge, or `J_i / ΣJ` over edges.
#[derive(Debug, Clone, Copy)]
pub enum Tier<'a> {
    Edge { devices: usize },
    Global(&'a Topology),
}

impl Tier<'_> {
    pub fn base_weights(&self) -> Vec<f64> {
        match self {
            Tier::Edge { devices } => vec![1.0 / *devices as f64; *devices],
            Tier::Global(topo) => {
                let total = topo.total_devices() as f64;
                topo.devices_per_edge().iter().map(|&j| j as f64 / total).collect()
            }
        }
    }
}

/// One aggregation step. Timely submissions are recorded into their
/// histories; stragglers (`None`) are handled according to `method`.
pub fn aggregate_tier(
    method: Aggregator,
    round: u64,
    tier: Tier<'_>,
    submissions: &[Option<WeightVector>],
    histories: &mut [SubmissionHistory],
    decay: &DecayParams,
    renormalize: bool,
) -> Result<AggregationReport> {
    let base = tier.base_weights();
    if submissions.len() != base.len() || histories.len() != base.len() {
        return Err(Error::Dimension {
            expected: base.len(),
            found: submissions.len().min(histories.len()),
        });
    }
    let n = base.len();
    let mut statuses = Vec::with_capacity(n);
    let mut coefficients = Vec::with_capacity(n);
    let mut inputs = Vec::with_capacity(n);
    for ((sub, hist), &b) in submissions.iter().zip(histories.iter_mut()).zip(&base) {
        match sub {
            Some(w) => {
                hist.record(round, w.clone())?;
                statuses.push(Status::Timely);
                coefficients.push(b);
                inputs.push(Some(w.clone()));
            }
            None => match method {
                Aggregator::HieAvg | Aggregator::OracleNoStragglers => {
                    let est = hist.estimate_delayed(round)?;
                    let gamma = decay.factor(hist.missed_rounds())?;
                    statuses.push(Status::Estimated);
                    coefficients.push(gamma * b);
                    inputs.push(Some(est));
                }
                Aggregator::TFedAvg => {
                    statuses.push(Status::Excluded);
                    coefficients.push(0.0);
                    inputs.push(None);
                }
                Aggregator::DFedAvg => {
                    let last = hist
                        .last_real()
                        .cloned()
                        .ok_or(Error::InsufficientHistory { needed: 1, have: 0 })?;
                    statuses.push(Status::Estimated);
                    coefficients.push(b);
                    inputs.push(Some(last));
                }
            },
        }
    }
    let timely_mass: f64 = coefficients
        .iter()
        .zip(&statuses)
        .filter(|(_, s)| **s == Status::Timely)
        .map(|(c, _)| c)
        .sum();
    let norm = match method {
        Aggregator::TFedAvg => {
            if timely_mass == 0.0 {
                return Err(Error::EmptyAggregation);
            }
            Some(timely_mass)
        }
        Aggregator::HieAvg | Aggregator::OracleNoStragglers if renormalize => Some(coefficients.iter().sum()),
        _ => None,
    };
    if let Some(z) = norm {
        // exact no-op when nobody straggled
        if statuses.iter().any(|s| *s != Status::Timely) {
            coefficients.iter_mut().for_each(|c| *c /= z);
        }
    }
    let aggregate = replay(&inputs, &coefficients)?;
    let mass = coefficients.iter().sum();
    Ok(AggregationReport {
        round,
        aggregate,
        statuses,
        coefficients,
        inputs,
        mass,
    })
}

/// HieAvg at an edge server with `submissions.len()` devices.
pub fn edge_aggregate(
    round: u64,
    submissions: &[Option<WeightVector>],
    histories: &mut [SubmissionHistory],
    decay: &DecayParams,
) -> Result<AggregationReport> {
    let tier = Tier::Edge {
        devices: submissions.len(),
    };
    aggregate_tier(Aggregator::HieAvg, round, tier, submissions, histories, decay, false)
}

/// HieAvg at the edge leader.
pub fn global_aggregate(
    round: u64,
    submissions: &[Option<WeightVector>],
    histories: &mut [SubmissionHistory],
    decay: &DecayParams,
    topology: &Topology,
) -> Result<AggregationReport> {
    aggregate_tier(
        Aggregator::HieAvg,
        round,
        Tier::Global(topology),
        submissions,
        histories,
        decay,
        false,
    )
}

/// Mean over timely submissions only, renormalised over the present set.
pub fn t_fedavg_aggregate(
    round: u64,
    tier: Tier<'_>,
    submissions: &[Option<WeightVector>],
    histories: &mut [SubmissionHistory],
) -> Result<AggregationReport> {
    aggregate_tier(
        Aggregator::TFedAvg,
        round,
        tier,
        submissions,
        histories,
        &DecayParams::default(),
        false,
    )
}

/// Full-population mean with stragglers represented by their last real submission.
pub fn d_fedavg_aggregate(
    round: u64,
    tier: Tier<'_>,
    submissions: &[Option<WeightVector>],
    histories: &mut [SubmissionHistory],
) -> Result<AggregationReport> {
    aggregate_tier(
        Aggregator::DFedAvg,
        round,
        tier,
        submissions,
        histories,
        &DecayParams::default(),
        false,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wv(v: &[f64]) -> WeightVector {
        WeightVector::new(v.to_vec()).unwrap()
    }

    fn hist(rows: &[&[f64]]) -> SubmissionHistory {
        SubmissionHistory::from_weights(rows.iter().map(|r| wv(r))).unwrap()
    }

    /// Brute-force mean of successive differences of a scalar sequence.
    fn brute_mean_diff(seq: &[f64]) -> f64 {
        let diffs: Vec<f64> = seq.windows(2).map(|w| w[1] - w[0]).collect();
        diffs.iter().sum::<f64>() / diffs.len() as f64
    }

    #[test]
    fn mean_weight_difference_examples() {
        assert_eq!(hist(&[&[0.], &[1.]]).mean_weight_difference().unwrap(), wv(&[1.]));
        assert_eq!(
            hist(&[&[0.], &[1.], &[3.]]).mean_weight_difference().unwrap(),
            wv(&[brute_mean_diff(&[0., 1., 3.])])
        );
        assert_eq!(
            hist(&[&[2.5], &[2.5], &[2.5]]).mean_weight_difference().unwrap(),
            wv(&[0.])
        );
        assert!(matches!(
            hist(&[&[1.]]).mean_weight_difference(),
            Err(Error::InsufficientHistory { .. })
        ));
    }

    #[test]
    fn last_n_window() {
        let mut h = SubmissionHistory::new(DeltaWindow::LastN(1), None);
        for (r, v) in [0.0, 1.0, 3.0].into_iter().enumerate() {
            h.record(r as u64 + 1, wv(&[v])).unwrap();
        }
        assert_eq!(h.mean_weight_difference().unwrap(), wv(&[2.0]));
    }

    #[test]
    fn estimate_examples() {
        assert_eq!(hist(&[&[1.], &[3.]]).estimate_delayed(3).unwrap(), wv(&[5.]));
        assert_eq!(hist(&[&[4.], &[4.]]).estimate_delayed(3).unwrap(), wv(&[4.]));
        let mut h = hist(&[&[0.], &[1.], &[3.]]);
        assert_eq!(h.estimate_delayed(4).unwrap(), wv(&[3.0 + 1.5]));
        assert_eq!(h.missed_rounds(), 1);
        assert!(h.last().unwrap().estimated);
        assert_eq!(h.len(), 4);
    }

    #[test]
    fn real_submission_resets_missed_counter() {
        let mut h = hist(&[&[0.], &[1.]]);
        h.estimate_delayed(3).unwrap();
        h.estimate_delayed(4).unwrap();
        assert_eq!(h.missed_rounds(), 2);
        h.record(5, wv(&[7.])).unwrap();
        assert_eq!(h.missed_rounds(), 0);
        // diffs: 1, 1, 1, 4 (7 - 3)
        assert_eq!(h.mean_weight_difference().unwrap(), wv(&[7.0 / 4.0]));
    }

    #[test]
    fn rounds_must_increase() {
        let mut h = hist(&[&[0.], &[1.]]);
        assert!(matches!(h.record(2, wv(&[2.])), Err(Error::HistoryOrder { .. })));
    }

    #[test]
    fn cap_keeps_all_window_exact() {
        let mut capped = SubmissionHistory::new(DeltaWindow::All, Some(2));
        let mut full = SubmissionHistory::default();
        for (r, v) in [0.0, 2.0, 3.0, 7.0, 8.0].into_iter().enumerate() {
            capped.record(r as u64, wv(&[v])).unwrap();
            full.record(r as u64, wv(&[v])).unwrap();
        }
        assert_eq!(capped.len(), 2);
        assert_eq!(
            capped.mean_weight_difference().unwrap(),
            full.mean_weight_difference().unwrap()
        );
    }

    #[test]
    fn decay_factor_examples() {
        let p = DecayParams::new(0.9, 0.9).unwrap();
        assert!((p.factor(1).unwrap() - 0.81).abs() < 1e-15);
        assert!((p.factor(3).unwrap() - 0.6561).abs() < 1e-15);
        let tiny = DecayParams::new(0.9, 0.01).unwrap().factor(100).unwrap();
        assert!((0.0..1e-100).contains(&tiny));
        assert!(DecayParams::new(0.9, 0.01).unwrap().factor(50).unwrap() > 0.0);
        assert!(p.factor(0).is_err());
        assert!(DecayParams::new(1.0, 0.5).is_err());
        assert!(DecayParams::new(0.5, 0.0).is_err());
    }

    #[test]
    fn edge_aggregate_no_stragglers_is_uniform_mean() {
        let mut hs = vec![SubmissionHistory::default(), SubmissionHistory::default()];
        let r = edge_aggregate(
            1,
            &[Some(wv(&[1., 3.])), Some(wv(&[3., 5.]))],
            &mut hs,
            &DecayParams::default(),
        )
        .unwrap();
        assert_eq!(r.aggregate, wv(&[2., 4.]));
        assert_eq!(r.mass, 1.0);
    }

    #[test]
    fn edge_aggregate_with_one_straggler() {
        let mut hs = vec![hist(&[&[0.], &[0.]]), hist(&[&[1.], &[3.]])];
        let decay = DecayParams::new(0.9, 0.9).unwrap();
        let r = edge_aggregate(3, &[Some(wv(&[2.])), None], &mut hs, &decay).unwrap();
        let expected = 0.5 * (2.0 + 0.81 * 5.0);
        assert!((r.aggregate.as_slice()[0] - expected).abs() < 1e-12);
        assert!((expected - 3.025).abs() < 1e-12);
        assert!((r.mass - 0.905).abs() < 1e-12);
        assert_eq!(r.statuses, vec![Status::Timely, Status::Estimated]);
    }

    #[test]
    fn edge_aggregate_all_stragglers_brute_force() {
        let rows: [&[&[f64]]; 3] = [
            &[&[1., 0.], &[2., 1.]],
            &[&[0., 0.], &[0., 4.], &[1., 4.]],
            &[&[5., 5.], &[4., 4.]],
        ];
        let mut hs: Vec<_> = rows.iter().map(|r| hist(r)).collect();
        let decay = DecayParams::new(0.8, 0.5).unwrap();
        let r = edge_aggregate(10, &[None, None, None], &mut hs, &decay).unwrap();
        // brute force: each estimate last + mean diff, weight γ0 λ / J
        let g = 0.8 * 0.5 / 3.0;
        let e0 = [2. + 1., 1. + 1.];
        let e1 = [1. + 0.5, 4. + 2.];
        let e2 = [4. - 1., 4. - 1.];
        for c in 0..2 {
            let want = g * e0[c] + g * e1[c] + g * e2[c];
            assert!((r.aggregate.as_slice()[c] - want).abs() < 1e-12);
        }
        assert!((r.mass - 3.0 * g).abs() < 1e-12);
    }

    #[test]
    fn global_aggregate_examples() {
        let decay = DecayParams::new(0.9, 0.9).unwrap();
        let topo = Topology::new(vec![5, 5]).unwrap();
        let mut hs = vec![SubmissionHistory::default(), SubmissionHistory::default()];
        let r = global_aggregate(1, &[Some(wv(&[1.])), Some(wv(&[3.]))], &mut hs, &decay, &topo).unwrap();
        assert_eq!(r.aggregate, wv(&[2.]));

        let topo = Topology::new(vec![4, 1]).unwrap();
        let mut hs = vec![SubmissionHistory::default(), SubmissionHistory::default()];
        let r = global_aggregate(1, &[Some(wv(&[0.])), Some(wv(&[10.]))], &mut hs, &decay, &topo).unwrap();
        assert!((r.aggregate.as_slice()[0] - (0.8 * 0.0 + 0.2 * 10.0)).abs() < 1e-12);

        let topo = Topology::new(vec![1, 1]).unwrap();
        let mut hs = vec![hist(&[&[7.], &[7.]]), hist(&[&[2.], &[4.]])];
        let w1 = 1.5;
        let r = global_aggregate(3, &[Some(wv(&[w1])), None], &mut hs, &decay, &topo).unwrap();
        let want = 0.5 * w1 + 0.405 * 6.0;
        assert!((r.aggregate.as_slice()[0] - want).abs() < 1e-12);
        assert!((r.mass - (0.5 + 0.405)).abs() < 1e-12);
    }

    #[test]
    fn benchmarks() {
        let tier = Tier::Edge { devices: 2 };
        let mut hs = vec![SubmissionHistory::default(), hist(&[&[9.]])];
        let r = t_fedavg_aggregate(2, tier, &[Some(wv(&[4.])), None], &mut hs).unwrap();
        assert_eq!(r.aggregate, wv(&[4.]));
        assert_eq!(r.mass, 1.0);
        assert_eq!(r.statuses[1], Status::Excluded);

        let tier = Tier::Edge { devices: 5 };
        let mut hs = vec![SubmissionHistory::default(); 5];
        let subs = [Some(wv(&[1.])), None, Some(wv(&[2.])), None, Some(wv(&[3.]))];
        let r = t_fedavg_aggregate(1, tier, &subs, &mut hs).unwrap();
        assert!((r.aggregate.as_slice()[0] - 2.0).abs() < 1e-12);

        let mut hs = vec![SubmissionHistory::default(), SubmissionHistory::default()];
        assert!(matches!(
            t_fedavg_aggregate(1, Tier::Edge { devices: 2 }, &[None, None], &mut hs),
            Err(Error::EmptyAggregation)
        ));

        let mut hs = vec![SubmissionHistory::default(), hist(&[&[1.], &[4.]])];
        let r = d_fedavg_aggregate(3, Tier::Edge { devices: 2 }, &[Some(wv(&[2.])), None], &mut hs).unwrap();
        assert_eq!(r.aggregate, wv(&[3.]));

        let mut hs = vec![SubmissionHistory::default(), SubmissionHistory::default()];
        assert!(matches!(
            d_fedavg_aggregate(1, Tier::Edge { devices: 2 }, &[Some(wv(&[2.])), None], &mut hs),
            Err(Error::InsufficientHistory { .. })
        ));
    }

    #[test]
    fn d_fedavg_freezes_permanent_straggler() {
        let mut hs = vec![SubmissionHistory::default(), hist(&[&[1.], &[4.]])];
        for r in 3..13 {
            let rep =
                d_fedavg_aggregate(r, Tier::Edge { devices: 2 }, &[Some(wv(&[r as f64])), None], &mut hs).unwrap();
            assert_eq!(rep.inputs[1], Some(wv(&[4.])));
        }
    }

    #[test]
    fn renormalize_flag_restores_unit_mass() {
        let mut hs = vec![hist(&[&[0.], &[0.]]), hist(&[&[1.], &[3.]])];
        let decay = DecayParams::new(0.9, 0.9).unwrap();
        let r = aggregate_tier(
            Aggregator::HieAvg,
            3,
            Tier::Edge { devices: 2 },
            &[Some(wv(&[2.])), None],
            &mut hs,
            &decay,
            true,
        )
        .unwrap();
        assert!((r.mass - 1.0).abs() < 1e-12);
        assert!((r.aggregate.as_slice()[0] - (2.0 + 0.81 * 5.0) / 1.81).abs() < 1e-12);
    }

    #[test]
    fn all_methods_agree_without_stragglers() {
        let topo = Topology::new(vec![3, 1, 2]).unwrap();
        let subs = [Some(wv(&[1., 2.])), Some(wv(&[-1., 0.5])), Some(wv(&[4., 4.]))];
        let mut outs = Vec::new();
        for m in Aggregator::ALL {
            let mut hs = vec![SubmissionHistory::default(); 3];
            let r = aggregate_tier(
                m,
                1,
                Tier::Global(&topo),
                &subs,
                &mut hs,
                &DecayParams::default(),
                false,
            )
            .unwrap();
            outs.push(r.aggregate);
        }
        for o in &outs[1..] {
            assert!(o.max_abs_diff(&outs[0]).unwrap() < 1e-12);
        }
    }

    #[test]
    fn report_replay_matches_aggregate() {
        let mut hs = vec![hist(&[&[0., 1.], &[1., 1.]]), hist(&[&[1., 3.], &[3., 2.]])];
        let r = edge_aggregate(5, &[Some(wv(&[2., 2.])), None], &mut hs, &DecayParams::default()).unwrap();
        assert_eq!(r.replay().unwrap(), r.aggregate);
    }
}
