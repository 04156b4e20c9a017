//! Oracles shared by the integration and acceptance tests. Everything here is
//! computed directly from definitions, independently of the library code
//! under test.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use bhfl::chain::{
    elect_leader, quorum, BlockPayload, ChainNetwork, EdgeRecord, ElectionConfig, Ledger, RaftNode, Role,
};
use bhfl::hieavg::{aggregate_tier, Aggregator, DecayParams, Status, SubmissionHistory, Tier};
use bhfl::latency::{theorem2_bound, BoundParams, KProblem, LatencyProfile};
use bhfl::model::WeightVector;
use bhfl::tasks::{gradient, loss, Dataset, TaskSpec};
use bhfl::{Error, Topology};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Central difference of the task loss along one coordinate.
pub fn finite_difference(task: &TaskSpec, w: &WeightVector, data: &Dataset, idx: usize, h: f64) -> f64 {
    let mut plus = w.as_slice().to_vec();
    let mut minus = plus.clone();
    plus[idx] += h;
    minus[idx] -= h;
    let lp = loss(task, &WeightVector::new(plus).unwrap(), data).unwrap();
    let lm = loss(task, &WeightVector::new(minus).unwrap(), data).unwrap();
    (lp - lm) / (2.0 * h)
}

/// Checks `checks` random (point, coordinate) pairs; returns the worst relative error.
pub fn gradient_check(task: &TaskSpec, data: &Dataset, checks: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..checks {
        let w = WeightVector::new((0..task.dim()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let g = gradient(task, &w, data).unwrap();
        let idx = rng.random_range(0..task.dim());
        let fd = finite_difference(task, &w, data, idx, 1e-5);
        let an = g.as_slice()[idx];
        let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    worst
}

pub fn basic_bounds() -> BoundParams {
    BoundParams {
        lipschitz: 2.0,
        gap0: 1.5,
        grad_var_edge: 0.3,
        grad_var_global: 0.2,
        est_var_edge: 0.01,
        est_var_global: 0.01,
        diff_var_device: 0.05,
        diff_var_edge: 0.1,
        diff_mean_device: 0.2,
        diff_mean_edge: 0.3,
        eta: 0.6,
        edge_stragglers: 1.0,
        device_stragglers: 1.0,
        devices_straggling: 4.0,
        devices_mean: 5.0,
        n_edges: 5,
        gamma0: 0.9,
    }
}

/// Direct transcription of the global bound; `None` outside its conditions.
pub fn omega(k: usize, t: usize, p: &BoundParams) -> Option<f64> {
    let share = p.devices_straggling / (p.n_edges as f64 * p.devices_mean);
    let kf = k as f64;
    if p.eta < 1.0 / (p.lipschitz + 2.0 * kf * share) {
        return None;
    }
    let bracket = share
        + p.gamma0 * p.edge_stragglers / p.n_edges as f64 * (p.diff_mean_edge + p.diff_var_edge * p.diff_var_edge)
        - p.est_var_global;
    let d = 2.0 * kf.sqrt() * p.eta * share + p.lipschitz * p.eta - 1.0;
    if bracket < 0.0 || d <= 0.0 {
        return None;
    }
    let first =
        2.0 * (p.gap0 + kf.sqrt() * p.eta * share * p.grad_var_global * p.grad_var_global) / ((t as f64).sqrt() * d);
    Some(first + (2.0 + p.lipschitz) * bracket / d)
}

/// Basic-setting K problem: 80 rounds, 5 x 5 devices, default latencies.
pub fn k_problem(l_bc: f64, target: f64) -> KProblem {
    let profile = LatencyProfile::default();
    let topo = Topology::uniform(5, 5).unwrap();
    KProblem {
        global_rounds: 80,
        n_edges: 5,
        mean_devices: 5.0,
        expectations: profile.expectations(&topo),
        max_device_latency: profile.max_device_latency(&topo),
        bounds: basic_bounds(),
        omega_target: target,
        consensus_latency: l_bc,
        k_max: 10,
    }
}

/// First K satisfying both constraints, scanning with [`omega`].
pub fn brute_force_k(p: &KProblem) -> Option<usize> {
    (1..=p.k_max).find(|&k| {
        let c1 = omega(k, p.global_rounds, &p.bounds).is_some_and(|o| o <= p.omega_target);
        let c2 = p.consensus_latency <= k as f64 * p.max_device_latency;
        c1 && c2
    })
}

/// Random constants for which the global bound applies at every K in `1..=10`,
/// drawn with `E[η] L <= 1` (the decay term can grow in K otherwise).
pub fn random_applicable_params(rng: &mut ChaCha8Rng) -> BoundParams {
    loop {
        let n_edges = rng.random_range(2..=10);
        let devices_mean = rng.random_range(2.0..10.0);
        let lipschitz = rng.random_range(0.5..5.0);
        let p = BoundParams {
            lipschitz,
            gap0: rng.random_range(0.01..5.0),
            grad_var_edge: rng.random_range(0.0..2.0),
            grad_var_global: rng.random_range(0.0..2.0),
            est_var_edge: rng.random_range(0.0..0.05),
            est_var_global: rng.random_range(0.0..0.05),
            diff_var_device: rng.random_range(0.0..1.0),
            diff_var_edge: rng.random_range(0.0..1.0),
            diff_mean_device: rng.random_range(0.0..1.0),
            diff_mean_edge: rng.random_range(0.0..1.0),
            eta: rng.random_range(0.3..1.0) / lipschitz,
            edge_stragglers: rng.random_range(0.0..n_edges as f64 / 2.0),
            device_stragglers: rng.random_range(0.0..devices_mean / 2.0),
            devices_straggling: rng.random_range(devices_mean..devices_mean * n_edges as f64),
            devices_mean,
            n_edges,
            gamma0: 0.9,
        };
        if (1..=10).all(|k| theorem2_bound(k, 50, &p).is_ok()) {
            return p;
        }
    }
}

/// Tallies of a run of random elections.
#[derive(Debug, Default)]
pub struct ElectionTally {
    pub won: usize,
    pub failed: usize,
}

/// Runs elections with random live sets on persistent clusters of 1 to 9
/// nodes until `wins` of them elected a leader. Every term must have at most
/// one leader, winners need a live majority, and minorities must fail.
pub fn election_safety(wins: usize, seed: u64) -> Result<ElectionTally, String> {
    let cfg = ElectionConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut clusters: BTreeMap<usize, Vec<RaftNode>> =
        (1..=9).map(|n| (n, (0..n).map(RaftNode::new).collect())).collect();
    let mut leaders: BTreeMap<(usize, u64), BTreeSet<usize>> = BTreeMap::new();
    let mut tally = ElectionTally::default();
    while tally.won < wins {
        let n = rng.random_range(1..=9);
        let live: BTreeSet<usize> = (0..n).filter(|_| rng.random_bool(0.7)).collect();
        let nodes = clusters.get_mut(&n).unwrap();
        match elect_leader(nodes, &live, &cfg, rng.random()) {
            Ok(out) => {
                if live.len() < quorum(n) || !live.contains(&out.leader) || out.votes < quorum(n) {
                    return Err(format!("n={n}: leader {} elected by {:?}", out.leader, live));
                }
                for (term, who) in &out.leaders_by_term {
                    let seen = leaders.entry((n, *term)).or_default();
                    seen.extend(who);
                    if seen.len() != 1 {
                        return Err(format!("n={n}, term {term}: leaders {seen:?}"));
                    }
                }
                let at_term: Vec<usize> = nodes
                    .iter()
                    .filter(|x| x.role == Role::Leader && x.term == out.term)
                    .map(|x| x.id)
                    .collect();
                if at_term != vec![out.leader] {
                    return Err(format!(
                        "n={n}, term {}: nodes claiming leadership {at_term:?}",
                        out.term
                    ));
                }
                tally.won += 1;
            }
            Err(Error::ElectionFailure { live: l, needed, .. }) => {
                if live.len() >= quorum(n) || (l, needed) != (live.len(), quorum(n)) {
                    return Err(format!("n={n}: majority {live:?} failed to elect"));
                }
                tally.failed += 1;
            }
            Err(e) => return Err(format!("unexpected error {e}")),
        }
    }
    Ok(tally)
}

/// Chain of `blocks` blocks appended by one leader of a three-node network.
pub fn test_chain(blocks: usize) -> Ledger {
    let mut net = ChainNetwork::new(3);
    let all = BTreeSet::from([0, 1, 2]);
    let out = net.elect(&all, &ElectionConfig::default(), 1).unwrap();
    for r in 0..blocks {
        let x = r as f64 * 0.37;
        let payload = BlockPayload {
            leader: out.leader,
            term: out.term,
            edges: (0..3)
                .map(|e| EdgeRecord {
                    edge: e,
                    status: if e == r % 3 { Status::Estimated } else { Status::Timely },
                    coefficient: 1.0 / 3.0,
                    weights: Some(vec![x + e as f64, -x]),
                })
                .collect(),
            global_model: vec![x + 1.0, -x],
            mass: 1.0,
        };
        net.append_block(out.leader, out.term, r as u64 + 1, &payload, &all)
            .unwrap();
    }
    net.canonical().clone()
}

#[derive(Clone, Copy, Debug)]
pub enum Field {
    Height,
    Round,
    Prev,
    Payload,
    Hash,
}

pub fn mutate(ledger: &mut Ledger, h: usize, field: Field, byte: usize, mask: u8) {
    let b = &mut ledger.blocks_mut()[h];
    match field {
        Field::Height => b.height ^= (mask as u64) << (8 * byte),
        Field::Round => b.round ^= (mask as u64) << (8 * byte),
        Field::Prev => b.prev_hash[byte] ^= mask,
        Field::Payload => b.payload[byte] ^= mask,
        Field::Hash => b.hash[byte] ^= mask,
    }
}

/// Every header byte plus the first, last and `payload_samples` random payload bytes.
pub fn mutation_sites(payload_len: usize, payload_samples: usize, rng: &mut ChaCha8Rng) -> Vec<(Field, usize)> {
    let mut sites: Vec<(Field, usize)> = Vec::new();
    sites.extend((0..8).map(|i| (Field::Height, i)));
    sites.extend((0..8).map(|i| (Field::Round, i)));
    sites.extend((0..32).map(|i| (Field::Prev, i)));
    sites.extend((0..32).map(|i| (Field::Hash, i)));
    sites.extend([0, payload_len - 1].map(|i| (Field::Payload, i)));
    sites.extend((0..payload_samples).map(|_| (Field::Payload, rng.random_range(0..payload_len))));
    sites
}

/// Largest deviations of r-th estimates from `last + r * mean_diff`, and of
/// their coefficients from `0.9 * 0.9^r`, for a participant absent `r_max`
/// rounds after three real submissions.
pub fn telescoping_errors(r_max: usize) -> (f64, f64) {
    let decay = DecayParams::new(0.9, 0.9).unwrap();
    let history = [vec![1.0, -2.0, 0.5], vec![1.5, -1.0, 0.25], vec![2.5, -0.5, 0.0]];
    let mut hist = vec![SubmissionHistory::default()];
    for (r, w) in history.iter().enumerate() {
        let subs = [Some(WeightVector::new(w.clone()).unwrap())];
        aggregate_tier(
            Aggregator::HieAvg,
            r as u64 + 1,
            Tier::Edge { devices: 1 },
            &subs,
            &mut hist,
            &decay,
            false,
        )
        .unwrap();
    }
    let mean_diff: Vec<f64> = (0..3)
        .map(|c| ((history[1][c] - history[0][c]) + (history[2][c] - history[1][c])) / 2.0)
        .collect();
    let (mut est_err, mut coeff_err) = (0.0f64, 0.0f64);
    for r in 1..=r_max {
        let rep = aggregate_tier(
            Aggregator::HieAvg,
            3 + r as u64,
            Tier::Edge { devices: 1 },
            &[None],
            &mut hist,
            &decay,
            false,
        )
        .unwrap();
        assert_eq!(rep.statuses[0], Status::Estimated);
        let input = rep.inputs[0].as_ref().unwrap().as_slice();
        for c in 0..3 {
            est_err = est_err.max((input[c] - (r as f64 * mean_diff[c] + history[2][c])).abs());
        }
        coeff_err = coeff_err.max((rep.coefficients[0] - 0.9 * 0.9f64.powi(r as i32)).abs());
    }
    (est_err, coeff_err)
}

/// Elections over random strict-minority live sets; every one must fail.
pub fn minority_failures(trials: usize, seed: u64) -> Result<usize, String> {
    let cfg = ElectionConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..trials {
        let n = rng.random_range(1..=11);
        let size = rng.random_range(0..quorum(n));
        let mut ids: Vec<usize> = (0..n).collect();
        ids.shuffle(&mut rng);
        let live: BTreeSet<usize> = ids.into_iter().take(size).collect();
        let mut nodes: Vec<RaftNode> = (0..n).map(RaftNode::new).collect();
        match elect_leader(&mut nodes, &live, &cfg, rng.random()) {
            Err(Error::ElectionFailure { .. }) => {}
            other => return Err(format!("n={n}, live {live:?}: {other:?}")),
        }
    }
    Ok(trials)
}
