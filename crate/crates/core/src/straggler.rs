//! Deterministic straggler schedules for devices and edge servers.
//!
//! Edge-tier slots are global rounds `(t, 0)`; device-tier slots are
//! `(t, k)` with `k >= 1`. A device miss entry `(t, 0)` covers every edge round
//! of `t`. Nobody is absent during cold boot (`t <= T_c`).

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ParticipantId, RoundClock, Topology};
use crate::seed::{mix_seed, unit_draw};

pub type Slot = (usize, usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Plan {
    Never,
    /// Absent in every global round `t >= stop_round`.
    Permanent {
        stop_round: usize,
    },
    /// Absent exactly in the listed slots.
    Temporary {
        misses: BTreeSet<Slot>,
    },
    /// Absent independently with probability `p` in each post-cold-boot slot.
    Bernoulli {
        p: f64,
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StragglerKind {
    #[default]
    None,
    Permanent,
    Temporary,
    Bernoulli,
}

/// How "stop submitting after R rounds" maps onto the first absent round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PermanentBoundary {
    /// First absence at round R.
    At,
    /// First absence at round R + 1.
    #[default]
    After,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Identity {
    /// Temporary misses alternate within a fixed pool of `min(2S, population)` participants.
    #[default]
    Fixed,
    /// Temporary misses are drawn from the whole population each slot.
    Rotating,
}

/// Generator parameters for [`build_schedule`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StragglerSpec {
    pub kind: StragglerKind,
    /// Absent edge servers per global round (S).
    pub edge_count: usize,
    /// Absent devices per edge server per edge round (S_i).
    pub device_count: usize,
    /// Rounds of participation before permanent stragglers stop.
    pub stop_after: usize,
    pub permanent_boundary: PermanentBoundary,
    pub identity: Identity,
    /// Miss probability for the Bernoulli kind.
    pub probability: f64,
}

impl Default for StragglerSpec {
    fn default() -> Self {
        Self {
            kind: StragglerKind::None,
            edge_count: 1,
            device_count: 1,
            stop_after: 40,
            permanent_boundary: PermanentBoundary::After,
            identity: Identity::Fixed,
            probability: 0.2,
        }
    }
}

impl StragglerSpec {
    pub fn none() -> Self {
        Self::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PlanEntry {
    participant: ParticipantId,
    plan: Plan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ScheduleRepr {
    devices_per_edge: Vec<usize>,
    cold_boot: usize,
    #[serde(default)]
    plans: Vec<PlanEntry>,
}

/// Immutable map from participant to presence plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleRepr", into = "ScheduleRepr")]
pub struct StragglerSchedule {
    topology: Topology,
    cold_boot: usize,
    plans: BTreeMap<ParticipantId, Plan>,
}

impl TryFrom<ScheduleRepr> for StragglerSchedule {
    type Error = Error;

    fn try_from(r: ScheduleRepr) -> Result<Self> {
        let mut plans = BTreeMap::new();
        for e in r.plans {
            if plans.insert(e.participant, e.plan).is_some() {
                return Err(Error::InfeasibleSchedule(format!(
                    "duplicate plan for {}",
                    e.participant
                )));
            }
        }
        StragglerSchedule::from_plans(Topology::new(r.devices_per_edge)?, r.cold_boot, plans)
    }
}

impl From<StragglerSchedule> for ScheduleRepr {
    fn from(s: StragglerSchedule) -> Self {
        ScheduleRepr {
            devices_per_edge: s.topology.devices_per_edge().to_vec(),
            cold_boot: s.cold_boot,
            plans: s
                .plans
                .into_iter()
                .map(|(participant, plan)| PlanEntry { participant, plan })
                .collect(),
        }
    }
}

impl StragglerSchedule {
    /// Everybody present in every round.
    pub fn all_present(topology: &Topology, cold_boot: usize) -> Self {
        Self {
            topology: topology.clone(),
            cold_boot,
            plans: BTreeMap::new(),
        }
    }

    pub fn from_plans(topology: Topology, cold_boot: usize, plans: BTreeMap<ParticipantId, Plan>) -> Result<Self> {
        if cold_boot < 2 {
            return Err(Error::Clock(format!("T_c must be ≥ 2, got {cold_boot}")));
        }
        for (id, plan) in &plans {
            if !topology.contains(*id) {
                return Err(Error::UnknownParticipant(*id));
            }
            match plan {
                Plan::Permanent { stop_round } if *stop_round <= cold_boot => {
                    return Err(Error::ScheduleViolation(format!(
                        "{id} stops at round {stop_round}, inside cold boot (T_c = {cold_boot})"
                    )))
                }
                Plan::Temporary { misses } => {
                    if let Some(&(t, k)) = misses.iter().find(|(t, _)| *t <= cold_boot) {
                        return Err(Error::ScheduleViolation(format!(
                            "{id} misses ({t},{k}) inside cold boot (T_c = {cold_boot})"
                        )));
                    }
                    if id.is_edge() && misses.iter().any(|&(_, k)| k != 0) {
                        return Err(Error::InfeasibleSchedule(format!("{id}: edge slots are (t, 0)")));
                    }
                }
                Plan::Bernoulli { p, .. } if !(0.0..=1.0).contains(p) => {
                    return Err(Error::InfeasibleSchedule(format!(
                        "{id}: probability {p} outside [0, 1]"
                    )))
                }
                _ => {}
            }
        }
        Ok(Self {
            topology,
            cold_boot,
            plans,
        })
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn cold_boot(&self) -> usize {
        self.cold_boot
    }

    pub fn plan(&self, id: ParticipantId) -> &Plan {
        self.plans.get(&id).unwrap_or(&Plan::Never)
    }

    pub fn plans(&self) -> impl Iterator<Item = (&ParticipantId, &Plan)> {
        self.plans.iter()
    }

    /// Whether `id` submits in time at `clock` (edges only look at `clock.t`).
    pub fn is_present(&self, id: ParticipantId, clock: &RoundClock) -> Result<bool> {
        if !self.topology.contains(id) {
            return Err(Error::UnknownParticipant(id));
        }
        Ok(self.present_unchecked(id, clock.t, clock.k))
    }

    pub(crate) fn present_unchecked(&self, id: ParticipantId, t: usize, k: usize) -> bool {
        if t <= self.cold_boot {
            return true;
        }
        let k = if id.is_edge() { 0 } else { k };
        match self.plan(id) {
            Plan::Never => true,
            Plan::Permanent { stop_round } => t < *stop_round,
            Plan::Temporary { misses } => !(misses.contains(&(t, k)) || (k != 0 && misses.contains(&(t, 0)))),
            Plan::Bernoulli { p, seed } => unit_draw(&[*seed, id_key(id), t as u64, k as u64]) >= *p,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("schedule serialises")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config("stragglers.schedule", e.to_string()))
    }
}

fn id_key(id: ParticipantId) -> u64 {
    match id {
        ParticipantId::Edge { edge } => (1 << 63) | edge as u64,
        ParticipantId::Device { edge, device } => ((edge as u64) << 32) | device as u64,
    }
}

/// Builds a deterministic schedule with exactly `edge_count` absent edges per
/// post-cold-boot global round and `device_count` absent devices per edge per
/// edge round (Bernoulli kind: independent misses instead).
pub fn build_schedule(
    topology: &Topology,
    spec: &StragglerSpec,
    global_rounds: usize,
    edge_rounds: usize,
    cold_boot: usize,
    seed: u64,
) -> Result<StragglerSchedule> {
    if cold_boot < 2 {
        return Err(Error::Clock(format!("T_c must be ≥ 2, got {cold_boot}")));
    }
    if spec.kind == StragglerKind::None {
        return Ok(StragglerSchedule::all_present(topology, cold_boot));
    }
    if spec.edge_count > topology.n_edges() {
        return Err(Error::InfeasibleSchedule(format!(
            "{} edge stragglers among {} edge servers",
            spec.edge_count,
            topology.n_edges()
        )));
    }
    if let Some((i, &j)) = topology
        .devices_per_edge()
        .iter()
        .enumerate()
        .find(|(_, &j)| spec.device_count > j)
    {
        return Err(Error::InfeasibleSchedule(format!(
            "{} device stragglers at edge {i} with {j} devices",
            spec.device_count
        )));
    }

    // edge tier first, then one group per edge
    let mut groups: Vec<(Vec<ParticipantId>, usize, Vec<Slot>)> = Vec::new();
    let post: Vec<usize> = (cold_boot + 1..=global_rounds).collect();
    groups.push((
        topology.edge_ids().collect(),
        spec.edge_count,
        post.iter().map(|&t| (t, 0)).collect(),
    ));
    for (i, &j) in topology.devices_per_edge().iter().enumerate() {
        groups.push((
            (0..j).map(|d| ParticipantId::device(i, d)).collect(),
            spec.device_count,
            post.iter()
                .flat_map(|&t| (1..=edge_rounds).map(move |k| (t, k)))
                .collect(),
        ));
    }

    let mut plans = BTreeMap::new();
    match spec.kind {
        StragglerKind::None => unreachable!(),
        StragglerKind::Bernoulli => {
            if !(0.0..=1.0).contains(&spec.probability) {
                return Err(Error::InfeasibleSchedule(format!(
                    "probability {} outside [0, 1]",
                    spec.probability
                )));
            }
            for id in topology.edge_ids().chain(topology.device_ids()) {
                plans.insert(
                    id,
                    Plan::Bernoulli {
                        p: spec.probability,
                        seed: mix_seed(&[seed, 0xbe]),
                    },
                );
            }
        }
        StragglerKind::Permanent => {
            let stop_round = match spec.permanent_boundary {
                PermanentBoundary::At => spec.stop_after,
                PermanentBoundary::After => spec.stop_after + 1,
            };
            if stop_round <= cold_boot {
                return Err(Error::InfeasibleSchedule(format!(
                    "permanent stragglers would stop at round {stop_round}, inside cold boot"
                )));
            }
            for (g, (population, count, _)) in groups.iter().enumerate() {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0x9e, g as u64]));
                for id in population.choose_multiple(&mut rng, *count) {
                    plans.insert(*id, Plan::Permanent { stop_round });
                }
            }
        }
        StragglerKind::Temporary => {
            for (g, (population, count, slots)) in groups.iter().enumerate() {
                if *count == 0 {
                    continue;
                }
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0x7e, g as u64]));
                let pool: Vec<ParticipantId> = match spec.identity {
                    Identity::Fixed => population
                        .choose_multiple(&mut rng, (2 * count).min(population.len()))
                        .copied()
                        .collect(),
                    Identity::Rotating => population.clone(),
                };
                let mut misses: BTreeMap<ParticipantId, BTreeSet<Slot>> = BTreeMap::new();
                let mut previous: Vec<ParticipantId> = Vec::new();
                for &slot in slots {
                    let mut candidates: Vec<ParticipantId> =
                        pool.iter().filter(|p| !previous.contains(p)).copied().collect();
                    if candidates.len() < *count {
                        candidates = pool.clone();
                    }
                    candidates.shuffle(&mut rng);
                    candidates.truncate(*count);
                    candidates.sort();
                    for id in &candidates {
                        misses.entry(*id).or_default().insert(slot);
                    }
                    previous = candidates;
                }
                for (id, m) in misses {
                    plans.insert(id, Plan::Temporary { misses: m });
                }
            }
        }
    }
    StragglerSchedule::from_plans(topology.clone(), cold_boot, plans)
}
