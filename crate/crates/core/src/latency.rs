//! Latency model, convergence-bound evaluators and the scan that picks the
//! number of edge aggregation rounds `K`.

use serde::{Deserialize, Serialize};

use crate::error::{Constraint, Error, Predicate, Result};
use crate::model::{ParticipantId, Topology};

/// Physical parameters of one device link and its processor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelParams {
    /// Hz
    pub bandwidth: f64,
    /// W
    pub power: f64,
    pub gain: f64,
    /// Noise power `ε²` in W.
    pub noise: f64,
    pub model_bits: f64,
    pub cycles: f64,
    /// cycles/s
    pub frequency: f64,
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!(
            "{name} must be a positive finite number, got {v}"
        )))
    }
}

fn nonnegative(name: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("{name} must be >= 0, got {v}")))
    }
}

impl ChannelParams {
    pub fn validate(&self) -> Result<()> {
        positive("bandwidth", self.bandwidth)?;
        positive("power", self.power)?;
        positive("gain", self.gain)?;
        positive("noise", self.noise)?;
        positive("model_bits", self.model_bits)?;
        positive("cycles", self.cycles)?;
        positive("frequency", self.frequency)
    }

    pub fn comm_latency(&self) -> Result<f64> {
        comm_latency(self.model_bits, transmission_rate(self)?)
    }

    pub fn compute_latency(&self) -> Result<f64> {
        compute_latency(self.cycles, self.frequency)
    }
}

/// Shannon rate `B log2(1 + u pi / eps^2)` in bits/s.
pub fn transmission_rate(c: &ChannelParams) -> Result<f64> {
    c.validate()?;
    Ok(c.bandwidth * (c.power * c.gain / c.noise).ln_1p() / std::f64::consts::LN_2)
}

pub fn comm_latency(bits: f64, rate: f64) -> Result<f64> {
    nonnegative("model_bits", bits)?;
    positive("rate", rate)?;
    Ok(bits / rate)
}

pub fn compute_latency(cycles: f64, frequency: f64) -> Result<f64> {
    nonnegative("cycles", cycles)?;
    positive("frequency", frequency)?;
    Ok(cycles / frequency)
}

/// Latency of one participant that differs from the profile defaults.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyOverride {
    pub participant: ParticipantId,
    /// Devices: one-way model transfer; edges: upload or download to the leader.
    pub comm: f64,
    /// Devices only; ignored for edges.
    #[serde(default)]
    pub compute: f64,
}

/// Per-round latencies in seconds. Defaults are the measured device and
/// edge figures of a Raspberry-Pi-class testbed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatencyProfile {
    pub device_comm: f64,
    pub device_compute: f64,
    pub edge_comm: f64,
    pub overrides: Vec<LatencyOverride>,
}

impl Default for LatencyProfile {
    fn default() -> Self {
        Self {
            device_comm: 0.51,
            device_compute: 1.67,
            edge_comm: 0.05,
            overrides: Vec::new(),
        }
    }
}

/// Arithmetic means `E[LM]`, `E[LP]`, `E[LM']` over a topology.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Expectations {
    pub device_comm: f64,
    pub device_compute: f64,
    pub edge_comm: f64,
}

impl LatencyProfile {
    pub fn validate(&self) -> Result<()> {
        nonnegative("device_comm", self.device_comm)?;
        nonnegative("device_compute", self.device_compute)?;
        nonnegative("edge_comm", self.edge_comm)?;
        for o in &self.overrides {
            nonnegative("override comm", o.comm)?;
            nonnegative("override compute", o.compute)?;
        }
        Ok(())
    }

    /// Uses the channel model for the device defaults.
    pub fn from_channel(channel: &ChannelParams, edge_comm: f64) -> Result<Self> {
        Ok(Self {
            device_comm: channel.comm_latency()?,
            device_compute: channel.compute_latency()?,
            edge_comm,
            overrides: Vec::new(),
        })
    }

    fn lookup(&self, id: ParticipantId) -> Option<&LatencyOverride> {
        self.overrides.iter().rev().find(|o| o.participant == id)
    }

    /// `(LM, LP)` of one device.
    pub fn device(&self, edge: usize, device: usize) -> (f64, f64) {
        match self.lookup(ParticipantId::device(edge, device)) {
            Some(o) => (o.comm, o.compute),
            None => (self.device_comm, self.device_compute),
        }
    }

    pub fn edge(&self, edge: usize) -> f64 {
        self.lookup(ParticipantId::edge(edge))
            .map_or(self.edge_comm, |o| o.comm)
    }

    pub fn expectations(&self, topology: &Topology) -> Expectations {
        let devices: Vec<(f64, f64)> = topology
            .device_ids()
            .filter_map(|id| match id {
                ParticipantId::Device { edge, device } => Some(self.device(edge, device)),
                ParticipantId::Edge { .. } => None,
            })
            .collect();
        let n = devices.len().max(1) as f64;
        let edges = topology.n_edges().max(1) as f64;
        Expectations {
            device_comm: devices.iter().map(|d| d.0).sum::<f64>() / n,
            device_compute: devices.iter().map(|d| d.1).sum::<f64>() / n,
            edge_comm: (0..topology.n_edges()).map(|i| self.edge(i)).sum::<f64>() / edges,
        }
    }

    /// Largest `LM + LP` over the devices of `topology`.
    pub fn max_device_latency(&self, topology: &Topology) -> f64 {
        topology
            .device_ids()
            .filter_map(|id| match id {
                ParticipantId::Device { edge, device } => {
                    let (m, p) = self.device(edge, device);
                    Some(m + p)
                }
                ParticipantId::Edge { .. } => None,
            })
            .fold(0.0, f64::max)
    }
}

/// `T N J K (2 E[LM] + E[LP]) + 2 T N E[LM']`, with `J` the mean device count.
pub fn total_latency(t: usize, n: usize, j: f64, k: usize, e: &Expectations) -> f64 {
    let tn = (t * n) as f64;
    tn * j * k as f64 * (2.0 * e.device_comm + e.device_compute) + 2.0 * tn * e.edge_comm
}

/// `L_g = K * max(LM + LP)` with the maximum taken over the cold boot.
pub fn waiting_period(k: usize, max_device_latency: f64) -> f64 {
    k as f64 * max_device_latency
}

/// Constants of the convergence bounds. None are known a priori; supply them
/// or estimate them from a calibration run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundParams {
    /// Lipschitz constant `L` of the gradient.
    pub lipschitz: f64,
    /// `F(w0) - F(w*)`.
    pub gap0: f64,
    /// Local gradient variance bound `δ'`.
    pub grad_var_edge: f64,
    /// Global gradient variance bound `δ''`.
    pub grad_var_global: f64,
    /// Estimated-weight variance bound at the edge, `δ̄`.
    pub est_var_edge: f64,
    /// Estimated-weight variance bound at the leader, `δ̄'`.
    pub est_var_global: f64,
    /// Device weight-difference variance `δ_ij`.
    pub diff_var_device: f64,
    /// Edge weight-difference variance `δ_i`.
    pub diff_var_edge: f64,
    /// Mean device weight-difference magnitude `Δ_ij`.
    pub diff_mean_device: f64,
    /// Mean edge weight-difference magnitude `Δ_i`.
    pub diff_mean_edge: f64,
    /// Mean learning rate over the horizon.
    pub eta: f64,
    /// Mean number of straggling edges per global round, `E[S]`.
    pub edge_stragglers: f64,
    /// Mean number of straggling devices per edge round, `E[S_i]`.
    pub device_stragglers: f64,
    /// `E[J_s]`: mean device count of a straggling edge.
    pub devices_straggling: f64,
    /// `E[J_i]`: mean device count per edge.
    pub devices_mean: f64,
    pub n_edges: usize,
    pub gamma0: f64,
}

impl BoundParams {
    pub fn validate(&self) -> Result<()> {
        positive("lipschitz", self.lipschitz)?;
        positive("eta", self.eta)?;
        positive("devices_mean", self.devices_mean)?;
        for (name, v) in [
            ("gap0", self.gap0),
            ("grad_var_edge", self.grad_var_edge),
            ("grad_var_global", self.grad_var_global),
            ("est_var_edge", self.est_var_edge),
            ("est_var_global", self.est_var_global),
            ("diff_var_device", self.diff_var_device),
            ("diff_var_edge", self.diff_var_edge),
            ("diff_mean_device", self.diff_mean_device),
            ("diff_mean_edge", self.diff_mean_edge),
            ("edge_stragglers", self.edge_stragglers),
            ("device_stragglers", self.device_stragglers),
            ("devices_straggling", self.devices_straggling),
            ("gamma0", self.gamma0),
        ] {
            nonnegative(name, v)?;
        }
        if self.n_edges == 0 {
            return Err(Error::Domain("n_edges must be >= 1".into()));
        }
        Ok(())
    }

    /// `E[J_s] / (N E[J_i])`.
    fn share(&self) -> f64 {
        self.devices_straggling / (self.n_edges as f64 * self.devices_mean)
    }
}

/// Per-edge quantities of the edge-server bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgeFields {
    /// `E[S_i]`
    pub stragglers: f64,
    /// `J_i`
    pub devices: usize,
}

/// Truth value of each applicability condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredicateReport {
    pub learning_rate: bool,
    pub nonnegativity: bool,
    pub denominator: bool,
}

impl PredicateReport {
    pub fn first_failure(&self) -> Option<Predicate> {
        if !self.learning_rate {
            Some(Predicate::LearningRate)
        } else if !self.nonnegativity {
            Some(Predicate::Nonnegativity)
        } else if !self.denominator {
            Some(Predicate::Denominator)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundValue {
    pub value: f64,
    /// Optimisation term, decaying in `K` (edge) or `T` (leader).
    pub decay_term: f64,
    /// Residual straggler term.
    pub straggler_term: f64,
}

fn theorem1_parts(k: usize, bp: &BoundParams, edge: &EdgeFields) -> (PredicateReport, f64, f64) {
    let l = bp.lipschitz;
    let eta = bp.eta;
    let denom = l * eta + 2.0 * eta - 1.0;
    let bracket = bp.gamma0 * (edge.stragglers / edge.devices as f64) * (bp.diff_mean_device + bp.diff_var_device)
        - bp.est_var_edge;
    let report = PredicateReport {
        learning_rate: eta > 1.0 / (l + 2.0),
        nonnegativity: bracket >= 0.0,
        // implied by the learning-rate condition; kept for a uniform report
        denominator: denom > 0.0,
    };
    let decay = 2.0 * (bp.gap0 + 2.0 * eta * bp.grad_var_edge.powi(2) / denom) / (denom * (k as f64).sqrt());
    let straggler = (2.0 + l) * bracket / denom;
    (report, decay, straggler)
}

pub fn theorem1_predicates(k: usize, bp: &BoundParams, edge: &EdgeFields) -> PredicateReport {
    theorem1_parts(k, bp, edge).0
}

/// Bound on the mean squared gradient norm of one edge server over `K` edge rounds.
pub fn theorem1_bound(k: usize, bp: &BoundParams, edge: &EdgeFields) -> Result<BoundValue> {
    bp.validate()?;
    if k == 0 || edge.devices == 0 {
        return Err(Error::Domain("K and J_i must be >= 1".into()));
    }
    let (report, decay_term, straggler_term) = theorem1_parts(k, bp, edge);
    if let Some(p) = report.first_failure() {
        return Err(Error::BoundInapplicable(p));
    }
    Ok(BoundValue {
        value: decay_term + straggler_term,
        decay_term,
        straggler_term,
    })
}

fn theorem2_parts(k: usize, t: usize, bp: &BoundParams) -> (PredicateReport, f64, f64) {
    let l = bp.lipschitz;
    let eta = bp.eta;
    let share = bp.share();
    let sqrt_k = (k as f64).sqrt();
    let c = eta * share;
    let denom = 2.0 * sqrt_k * c + l * eta - 1.0;
    let bracket = share
        + bp.gamma0 * (bp.edge_stragglers / bp.n_edges as f64) * (bp.diff_mean_edge + bp.diff_var_edge.powi(2))
        - bp.est_var_global;
    let report = PredicateReport {
        learning_rate: eta >= 1.0 / (l + 2.0 * k as f64 * share),
        nonnegativity: bracket >= 0.0,
        denominator: denom > 0.0,
    };
    let decay = 2.0 * (bp.gap0 + sqrt_k * c * bp.grad_var_global.powi(2)) / ((t as f64).sqrt() * denom);
    let straggler = (2.0 + l) * bracket / denom;
    (report, decay, straggler)
}

pub fn theorem2_predicates(k: usize, t: usize, bp: &BoundParams) -> PredicateReport {
    theorem2_parts(k, t, bp).0
}

/// `Ω`: bound on the time-averaged squared gradient norm of the global model.
pub fn theorem2_bound(k: usize, t: usize, bp: &BoundParams) -> Result<BoundValue> {
    bp.validate()?;
    if k == 0 || t == 0 {
        return Err(Error::Domain("K and T must be >= 1".into()));
    }
    let (report, decay_term, straggler_term) = theorem2_parts(k, t, bp);
    if let Some(p) = report.first_failure() {
        return Err(Error::BoundInapplicable(p));
    }
    Ok(BoundValue {
        value: decay_term + straggler_term,
        decay_term,
        straggler_term,
    })
}

/// Inputs of the `K` scan.
#[derive(Debug, Clone, PartialEq)]
pub struct KProblem {
    pub global_rounds: usize,
    pub n_edges: usize,
    pub mean_devices: f64,
    pub expectations: Expectations,
    /// Worst device `LM + LP` seen during the cold boot.
    pub max_device_latency: f64,
    pub bounds: BoundParams,
    /// Required `Ω̄`.
    pub omega_target: f64,
    /// `L_bc`
    pub consensus_latency: f64,
    pub k_max: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KRow {
    pub k: usize,
    /// `None` when the bound does not apply at this `K`.
    pub omega: Option<f64>,
    pub inapplicable: Option<Predicate>,
    pub waiting_period: f64,
    pub total_latency: f64,
    pub convergence_ok: bool,
    pub latency_ok: bool,
}

impl KRow {
    pub fn feasible(&self) -> bool {
        self.convergence_ok && self.latency_ok
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KReport {
    pub k_star: usize,
    pub rows: Vec<KRow>,
    /// Constraints that rule out `K* - 1`.
    pub binding: Vec<Constraint>,
}

/// Evaluates both constraints and the total latency for every `K` in `1..=k_max`.
pub fn k_table(p: &KProblem) -> Result<Vec<KRow>> {
    if p.k_max == 0 {
        return Err(Error::Domain("k_max must be >= 1".into()));
    }
    positive("omega_target", p.omega_target)?;
    nonnegative("consensus_latency", p.consensus_latency)?;
    p.bounds.validate()?;
    Ok((1..=p.k_max)
        .map(|k| {
            let (omega, inapplicable) = match theorem2_bound(k, p.global_rounds, &p.bounds) {
                Ok(b) => (Some(b.value), None),
                Err(Error::BoundInapplicable(pred)) => (None, Some(pred)),
                Err(_) => (None, None),
            };
            let waiting = waiting_period(k, p.max_device_latency);
            KRow {
                k,
                omega,
                inapplicable,
                waiting_period: waiting,
                total_latency: total_latency(p.global_rounds, p.n_edges, p.mean_devices, k, &p.expectations),
                convergence_ok: omega.is_some_and(|o| o <= p.omega_target),
                latency_ok: p.consensus_latency <= waiting,
            }
        })
        .collect())
}

/// Smallest feasible `K`, which minimises the total latency since it grows
/// with `K`. A `K` where the bound is inapplicable counts as violating C1.
pub fn optimize_k(p: &KProblem) -> Result<KReport> {
    let rows = k_table(p)?;
    let Some(pos) = rows.iter().position(KRow::feasible) else {
        let c1 = rows.iter().filter(|r| r.convergence_ok).count();
        let c2 = rows.iter().filter(|r| r.latency_ok).count();
        let tighter = if c2 < c1 {
            Constraint::ConsensusLatency
        } else {
            Constraint::Convergence
        };
        return Err(Error::InfeasibleK {
            k_max: p.k_max,
            tighter,
        });
    };
    let mut binding = Vec::new();
    if let Some(prev) = pos.checked_sub(1).map(|i| &rows[i]) {
        if !prev.convergence_ok {
            binding.push(Constraint::Convergence);
        }
        if !prev.latency_ok {
            binding.push(Constraint::ConsensusLatency);
        }
    }
    Ok(KReport {
        k_star: rows[pos].k,
        rows,
        binding,
    })
}
