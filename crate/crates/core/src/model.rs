//! Topology, round clock and weight-vector arithmetic.
//!
//! All reductions run left to right in input order so repeated runs are
//! bit-identical.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Flat parameter vector of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub(crate) fn from_raw(values: Vec<f64>) -> Self {
        Self(values)
    }

    fn check_dim(&self, other: &WeightVector) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::Dimension {
                expected: self.len(),
                found: other.len(),
            });
        }
        Ok(())
    }

    fn finite(values: Vec<f64>) -> Result<Self> {
        if values.iter().all(|v| v.is_finite()) {
            Ok(Self(values))
        } else {
            Err(Error::NonFinite)
        }
    }

    /// `a * x + y`, elementwise.
    pub fn axpy(a: f64, x: &WeightVector, y: &WeightVector) -> Result<WeightVector> {
        x.check_dim(y)?;
        Self::finite(x.0.iter().zip(&y.0).map(|(xi, yi)| a * xi + yi).collect())
    }

    /// `self - other`, elementwise.
    pub fn sub(&self, other: &WeightVector) -> Result<WeightVector> {
        WeightVector::axpy(-1.0, other, self)
    }

    pub fn scale(&self, a: f64) -> Result<WeightVector> {
        Self::finite(self.0.iter().map(|v| a * v).collect())
    }

    pub fn norm_sq(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }

    pub fn dot(&self, other: &WeightVector) -> Result<f64> {
        self.check_dim(other)?;
        Ok(self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum())
    }

    /// Largest absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &WeightVector) -> Result<f64> {
        self.check_dim(other)?;
        Ok(self
            .0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

impl From<WeightVector> for Vec<f64> {
    fn from(w: WeightVector) -> Self {
        w.0
    }
}

/// `Σ coeffs[n] * weights[n]`, summed in index order. Never renormalises.
pub fn weighted_mean<W: AsRef<WeightVector>>(weights: &[W], coeffs: &[f64]) -> Result<WeightVector> {
    let first = weights.first().ok_or(Error::EmptyAggregation)?.as_ref();
    if weights.len() != coeffs.len() {
        return Err(Error::Dimension {
            expected: weights.len(),
            found: coeffs.len(),
        });
    }
    if let Some(c) = coeffs.iter().find(|c| !c.is_finite() || **c < 0.0) {
        return Err(Error::Domain(format!(
            "aggregation coefficient {c} must be finite and >= 0"
        )));
    }
    let mut acc = vec![0.0; first.len()];
    for (w, &c) in weights.iter().zip(coeffs) {
        let w = w.as_ref();
        first.check_dim(w)?;
        for (a, v) in acc.iter_mut().zip(&w.0) {
            *a += c * v;
        }
    }
    WeightVector::finite(acc)
}

impl AsRef<WeightVector> for WeightVector {
    fn as_ref(&self) -> &WeightVector {
        self
    }
}

/// Edge servers and the devices attached to each of them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    devices_per_edge: Vec<usize>,
}

impl Topology {
    pub fn new(devices_per_edge: Vec<usize>) -> Result<Self> {
        if devices_per_edge.is_empty() {
            return Err(Error::Topology("need at least one edge server".into()));
        }
        if let Some(i) = devices_per_edge.iter().position(|&j| j == 0) {
            return Err(Error::Topology(format!("edge {i} has no devices")));
        }
        Ok(Self { devices_per_edge })
    }

    pub fn uniform(n_edges: usize, devices: usize) -> Result<Self> {
        Self::new(vec![devices; n_edges])
    }

    pub fn n_edges(&self) -> usize {
        self.devices_per_edge.len()
    }

    /// J_i for edge `i`. Panics on an out-of-range edge.
    pub fn devices(&self, edge: usize) -> usize {
        self.devices_per_edge[edge]
    }

    pub fn devices_per_edge(&self) -> &[usize] {
        &self.devices_per_edge
    }

    pub fn total_devices(&self) -> usize {
        self.devices_per_edge.iter().sum()
    }

    pub fn mean_devices(&self) -> f64 {
        self.total_devices() as f64 / self.n_edges() as f64
    }

    pub fn contains(&self, id: ParticipantId) -> bool {
        match id {
            ParticipantId::Edge { edge } => edge < self.n_edges(),
            ParticipantId::Device { edge, device } => edge < self.n_edges() && device < self.devices_per_edge[edge],
        }
    }

    /// Every device, edge-major.
    pub fn device_ids(&self) -> impl Iterator<Item = ParticipantId> + '_ {
        self.devices_per_edge
            .iter()
            .enumerate()
            .flat_map(|(edge, &j)| (0..j).map(move |device| ParticipantId::Device { edge, device }))
    }

    pub fn edge_ids(&self) -> impl Iterator<Item = ParticipantId> {
        (0..self.n_edges()).map(|edge| ParticipantId::Edge { edge })
    }
}

/// Position in the (global round, edge round) schedule. Rounds are 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoundClock {
    pub t: usize,
    pub k: usize,
    pub edge_rounds: usize,
    pub global_rounds: usize,
    pub cold_boot: usize,
}

impl RoundClock {
    pub fn new(t: usize, k: usize, edge_rounds: usize, global_rounds: usize, cold_boot: usize) -> Result<Self> {
        if cold_boot < 2 {
            return Err(Error::Clock(format!("T_c must be ≥ 2, got {cold_boot}")));
        }
        if edge_rounds == 0 || !(1..=edge_rounds).contains(&k) {
            return Err(Error::Clock(format!("edge round {k} outside 1..={edge_rounds}")));
        }
        if !(1..=global_rounds).contains(&t) {
            return Err(Error::Clock(format!("global round {t} outside 1..={global_rounds}")));
        }
        Ok(Self {
            t,
            k,
            edge_rounds,
            global_rounds,
            cold_boot,
        })
    }

    /// `t * K + k`; strictly increasing over the run.
    pub fn flat_step(&self) -> u64 {
        (self.t * self.edge_rounds + self.k) as u64
    }

    pub fn in_cold_boot(&self) -> bool {
        self.t <= self.cold_boot
    }

    pub fn at(&self, t: usize, k: usize) -> Self {
        Self { t, k, ..*self }
    }
}

/// A device `(edge, device)` or an edge server. Indices are 0-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ParticipantId {
    Device { edge: usize, device: usize },
    Edge { edge: usize },
}

impl ParticipantId {
    pub fn device(edge: usize, device: usize) -> Self {
        ParticipantId::Device { edge, device }
    }

    pub fn edge(edge: usize) -> Self {
        ParticipantId::Edge { edge }
    }

    pub fn is_edge(&self) -> bool {
        matches!(self, ParticipantId::Edge { .. })
    }
}

impl fmt::Display for ParticipantId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParticipantId::Device { edge, device } => write!(f, "device({edge},{device})"),
            ParticipantId::Edge { edge } => write!(f, "edge({edge})"),
        }
    }
}
