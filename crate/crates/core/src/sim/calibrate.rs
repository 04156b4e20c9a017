//! Empirical estimates of the convergence-bound constants from one run.
//!
//! These are rough plug-in estimates, not certified bounds: maxima and
//! means are taken over the states the run actually visited.

use serde::{Deserialize, Serialize};

use super::{run_scenario, ExperimentConfig, RunOutput, Scenario};
use crate::error::{Error, Result};
use crate::hieavg::{Aggregator, Status, SubmissionHistory};
use crate::latency::{BoundParams, EdgeFields};
use crate::model::ParticipantId;
use crate::model::WeightVector;
use crate::tasks::{gradient, loss, Dataset};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundEstimate {
    pub params: BoundParams,
    /// `E[S_i]` and `J_i` for every edge.
    pub edges: Vec<EdgeFields>,
    /// Mean `L_bc` over the run.
    pub consensus_latency: f64,
    /// Worst device `LM + LP` in the cold boot.
    pub max_device_latency: f64,
}

fn dist(a: &WeightVector, b: &WeightVector) -> Result<f64> {
    Ok(a.sub(b)?.norm_sq().sqrt())
}

/// `(mean ‖d‖, rms ‖d - d̄‖, rms one-step prediction error)` over the real
/// entries of the given histories, where `d` are successive differences.
fn difference_stats<'a>(histories: impl Iterator<Item = &'a SubmissionHistory>) -> Result<(f64, f64, f64)> {
    let (mut mag, mut var, mut err) = (Vec::new(), Vec::new(), Vec::new());
    for h in histories {
        let real: Vec<&WeightVector> = h.entries().filter(|e| !e.estimated).map(|e| &e.weights).collect();
        let diffs: Vec<WeightVector> = real.windows(2).map(|w| w[1].sub(w[0])).collect::<Result<_>>()?;
        if diffs.is_empty() {
            continue;
        }
        let mut mean = WeightVector::zeros(diffs[0].len());
        for (n, d) in diffs.iter().enumerate() {
            mag.push(d.norm_sq().sqrt());
            if n >= 1 {
                // prediction of entry n+1 from entry n and the mean of the n earlier differences
                let pred = WeightVector::axpy(1.0, &mean, real[n])?;
                err.push(dist(&pred, real[n + 1])?.powi(2));
            }
            mean = WeightVector::axpy(1.0 / (n + 1) as f64, &d.sub(&mean)?, &mean)?;
        }
        for d in &diffs {
            var.push(d.sub(&mean)?.norm_sq());
        }
    }
    let avg = |v: &[f64]| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    Ok((avg(&mag), avg(&var).sqrt(), avg(&err).sqrt()))
}

/// Runs `cfg` once and derives every bound constant from what it observed.
pub fn estimate_bounds(cfg: &ExperimentConfig) -> Result<BoundEstimate> {
    let mut sc = Scenario::build(cfg)?;
    if cfg.aggregator == Aggregator::OracleNoStragglers {
        sc = sc.without_stragglers();
    }
    let out = run_scenario(cfg, &sc, cfg.aggregator)?;
    from_run(cfg, &sc, &out)
}

pub(crate) fn from_run(cfg: &ExperimentConfig, sc: &Scenario, out: &RunOutput) -> Result<BoundEstimate> {
    let topo = &sc.topology;
    let n = topo.n_edges();
    let task = &sc.task;
    let all = Dataset::concat(sc.partition.iter().map(|(_, d)| d)).ok_or(Error::NoData)?;
    let edge_data: Vec<Dataset> = (0..n)
        .map(|i| Dataset::concat(sc.partition.edge_shards(i)).ok_or(Error::NoData))
        .collect::<Result<_>>()?;

    let mut states = vec![task.init_weights(crate::seed::mix_seed(&[cfg.seed, super::INIT]))];
    states.extend(out.trajectory.iter().cloned());

    let mut lipschitz: f64 = 0.0;
    let grads: Vec<WeightVector> = states.iter().map(|w| gradient(task, w, &all)).collect::<Result<_>>()?;
    for (w, g) in states.windows(2).zip(grads.windows(2)) {
        let dw = dist(&w[0], &w[1])?;
        if dw > 0.0 {
            lipschitz = lipschitz.max(dist(&g[0], &g[1])? / dw);
        }
    }
    let losses: Vec<f64> = states.iter().map(|w| loss(task, w, &all)).collect::<Result<_>>()?;
    let best = losses.iter().copied().fold(f64::INFINITY, f64::min);
    let gap0 = (losses[0] - best).max(0.0);

    let (mut var_edge, mut var_global): (f64, f64) = (0.0, 0.0);
    for (w, g) in states.iter().zip(&grads) {
        let mut edge_mean = 0.0;
        let mut dev_mean = 0.0;
        for (i, data) in edge_data.iter().enumerate() {
            let ge = gradient(task, w, data)?;
            edge_mean += ge.sub(g)?.norm_sq() / n as f64;
            let shards = sc.partition.edge_shards(i);
            let mut d = 0.0;
            for shard in shards {
                d += gradient(task, w, shard)?.sub(&ge)?.norm_sq() / shards.len() as f64;
            }
            dev_mean += d / n as f64;
        }
        var_edge = var_edge.max(dev_mean);
        var_global = var_global.max(edge_mean);
    }

    let (dm_dev, dv_dev, est_dev) = difference_stats(out.device_histories.iter().flatten())?;
    let (dm_edge, dv_edge, est_edge) = difference_stats(out.edge_histories.iter())?;

    let t = out.records.len().max(1) as f64;
    let k = cfg.rounds.edge as f64;
    let edge_stragglers = out.records.iter().map(|r| r.edge_stragglers as f64).sum::<f64>() / t;
    let absent_j: Vec<f64> = out
        .global_reports
        .iter()
        .flat_map(|rep| {
            rep.statuses
                .iter()
                .enumerate()
                .filter(|(_, s)| **s != Status::Timely)
                .map(|(i, _)| topo.devices(i) as f64)
        })
        .collect();
    let devices_straggling = if absent_j.is_empty() {
        topo.mean_devices()
    } else {
        absent_j.iter().sum::<f64>() / absent_j.len() as f64
    };
    let mut late = vec![0usize; n];
    for s in &out.statuses {
        if let ParticipantId::Device { edge, .. } = s.participant {
            if s.status != Status::Timely {
                late[edge] += 1;
            }
        }
    }
    let edges: Vec<EdgeFields> = (0..n)
        .map(|i| EdgeFields {
            stragglers: late[i] as f64 / (t * k),
            devices: topo.devices(i),
        })
        .collect();
    let device_stragglers = edges.iter().map(|e| e.stragglers).sum::<f64>() / n as f64;

    let params = BoundParams {
        lipschitz: lipschitz.max(f64::MIN_POSITIVE),
        gap0,
        grad_var_edge: var_edge.sqrt(),
        grad_var_global: var_global.sqrt(),
        est_var_edge: est_dev,
        est_var_global: est_edge,
        diff_var_device: dv_dev,
        diff_var_edge: dv_edge,
        diff_mean_device: dm_dev,
        diff_mean_edge: dm_edge,
        eta: sc.lr.mean_rate(cfg.rounds.global),
        edge_stragglers,
        device_stragglers,
        devices_straggling,
        devices_mean: topo.mean_devices(),
        n_edges: n,
        gamma0: cfg.aggregation.gamma0,
    };
    Ok(BoundEstimate {
        params,
        edges,
        consensus_latency: out.summary.mean_consensus_latency,
        max_device_latency: sc.profile.max_device_latency(topo),
    })
}
