//! End-to-end simulation: cold boot, then estimation rounds of
//! election, device training, edge aggregation, submission to the leader,
//! global aggregation and block append.

mod calibrate;
mod compare;
mod config;
mod metrics;

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use calibrate::{estimate_bounds, BoundEstimate};
pub use compare::{compare_aggregators, sweep, Comparison, SweepAxis, SweepPoint};
pub use config::{
    AggregationConfig, ChainConfig, ExperimentConfig, LeaderTenure, OptimizeConfig, OutputConfig, RoundsConfig,
    TaskConfig, TopologyConfig, TrainingConfig,
};
pub use metrics::{read_metrics, write_metrics, MetricsRecord, RunSummary, METRICS_HEADER};

use crate::chain::{consensus_latency, BlockPayload, ChainNetwork, EdgeRecord, ElectionOutcome, Ledger};
use crate::error::{Error, Result};
use crate::hieavg::{aggregate_tier, AggregationReport, Aggregator, Status, SubmissionHistory, Tier};
use crate::latency::LatencyProfile;
use crate::model::{ParticipantId, RoundClock, Topology, WeightVector};
use crate::seed::mix_seed;
use crate::straggler::{build_schedule, StragglerSchedule};
use crate::tasks::{
    accuracy, gradient, local_train, loss, partition_non_iid, Dataset, LrSchedule, Partition, SyntheticClassification,
    SyntheticRegression, TaskKind, TaskSpec,
};

// Stream tags for `mix_seed`.
const DATA: u64 = 1;
const SPLIT: u64 = 2;
const PARTITION: u64 = 3;
const STRAGGLERS: u64 = 4;
const INIT: u64 = 5;
const ELECTION: u64 = 6;
const TRAIN: u64 = 7;

/// Data, shards and schedules derived from a config and its seed.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub task: TaskSpec,
    pub topology: Topology,
    pub train: Dataset,
    pub test: Dataset,
    pub partition: Partition,
    pub lr: LrSchedule,
    pub stragglers: StragglerSchedule,
    pub profile: LatencyProfile,
}

impl Scenario {
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let topology = cfg.topology()?;
        let task = cfg.task.spec();
        let t = &cfg.task;
        let data_seed = mix_seed(&[cfg.seed, DATA]);
        let data = match t.kind {
            TaskKind::LinearRegression => SyntheticRegression {
                n_samples: t.n_samples,
                dim: t.input_dim,
                n_groups: t.n_groups,
                group_shift: t.group_shift,
                concept_shift: t.concept_shift,
                noise: t.noise,
            }
            .generate(data_seed)?,
            TaskKind::SoftmaxClassifier | TaskKind::OneHiddenMlp => SyntheticClassification {
                n_samples: t.n_samples,
                n_classes: t.n_classes,
                dim: t.input_dim,
                separation: t.separation,
                noise: t.noise,
            }
            .generate(data_seed)?,
        };
        let (train, test) = data.split(t.test_fraction, mix_seed(&[cfg.seed, SPLIT]))?;
        let partition = partition_non_iid(
            &train,
            &topology,
            t.classes_per_device,
            mix_seed(&[cfg.seed, PARTITION]),
        )?;
        let stragglers = build_schedule(
            &topology,
            &cfg.stragglers,
            cfg.rounds.global,
            cfg.rounds.edge,
            cfg.rounds.cold_boot,
            mix_seed(&[cfg.seed, STRAGGLERS]),
        )?;
        Ok(Self {
            task,
            lr: cfg.schedule()?,
            profile: cfg.latency_profile()?,
            topology,
            train,
            test,
            partition,
            stragglers,
        })
    }

    /// Same scenario with every participant always present.
    pub fn without_stragglers(&self) -> Self {
        Self {
            stragglers: StragglerSchedule::all_present(&self.topology, self.stragglers.cold_boot()),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum EventKind {
    ElectionComplete { leader: usize, term: u64 },
    EdgeSubmission { edge: usize },
    GlobalAggregation,
    BlockAppended { height: u64 },
}

/// Workflow event in simulated seconds since the start of the run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimEvent {
    pub round: usize,
    pub time: f64,
    #[serde(flatten)]
    pub kind: EventKind,
}

/// Classification of one participant in one aggregation slot. Edges use `k = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusEntry {
    pub participant: ParticipantId,
    pub t: usize,
    pub k: usize,
    pub status: Status,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub aggregator: Aggregator,
    pub final_model: WeightVector,
    /// Global model after each round.
    pub trajectory: Vec<WeightVector>,
    pub records: Vec<MetricsRecord>,
    pub ledger: Ledger,
    pub network: ChainNetwork,
    pub events: Vec<SimEvent>,
    pub statuses: Vec<StatusEntry>,
    pub global_reports: Vec<AggregationReport>,
    /// Final submission histories, `[edge][device]`.
    pub device_histories: Vec<Vec<SubmissionHistory>>,
    pub edge_histories: Vec<SubmissionHistory>,
    pub summary: RunSummary,
}

/// Election happens before any submission, which happens before the block.
pub fn check_ordering(events: &[SimEvent]) -> Result<()> {
    let mut rounds: Vec<usize> = events.iter().map(|e| e.round).collect();
    rounds.dedup();
    for r in rounds {
        let of = |pred: fn(&EventKind) -> bool| -> Vec<f64> {
            events
                .iter()
                .filter(|e| e.round == r && pred(&e.kind))
                .map(|e| e.time)
                .collect()
        };
        let election = of(|k| matches!(k, EventKind::ElectionComplete { .. }));
        let submissions = of(|k| matches!(k, EventKind::EdgeSubmission { .. }));
        let aggregation = of(|k| matches!(k, EventKind::GlobalAggregation));
        let blocks = of(|k| matches!(k, EventKind::BlockAppended { .. }));
        let fail = |what: &str| Err(Error::ScheduleViolation(format!("round {r}: {what}")));
        if election.len() != 1 || aggregation.len() != 1 || blocks.len() != 1 {
            return fail("expected one election, one aggregation and one block");
        }
        let (e, a, b) = (election[0], aggregation[0], blocks[0]);
        if submissions.iter().any(|&s| s < e) || e > a {
            return fail("submission or aggregation before the election completed");
        }
        if submissions.iter().any(|&s| s > a) || a > b {
            return fail("block appended before all submissions arrived");
        }
    }
    Ok(())
}

fn ids(topology: &Topology) -> Vec<(usize, usize)> {
    topology
        .devices_per_edge()
        .iter()
        .enumerate()
        .flat_map(|(i, &j)| (0..j).map(move |d| (i, d)))
        .collect()
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let scenario = Scenario::build(cfg)?;
    match cfg.aggregator {
        Aggregator::OracleNoStragglers => run_scenario(cfg, &scenario.without_stragglers(), cfg.aggregator),
        a => run_scenario(cfg, &scenario, a),
    }
}

/// Runs `method` on a prepared scenario. The oracle method is plain HieAvg
/// here; pass a straggler-free scenario to obtain the benchmark.
pub fn run_scenario(cfg: &ExperimentConfig, sc: &Scenario, method: Aggregator) -> Result<RunOutput> {
    let n = sc.topology.n_edges();
    let (k_rounds, t_rounds, t_c) = (cfg.rounds.edge, cfg.rounds.global, cfg.rounds.cold_boot);
    let decay = cfg.aggregation.decay();
    let renormalize = cfg.aggregation.renormalize;
    let new_history = || SubmissionHistory::new(cfg.aggregation.window, cfg.aggregation.history_cap);
    let election_cfg = cfg.chain.election;
    let msg = election_cfg.message_latency;
    let prof = &sc.profile;
    let train_all = Dataset::concat(sc.partition.iter().map(|(_, d)| d)).ok_or(Error::NoData)?;
    let devices = ids(&sc.topology);

    let mut global = sc.task.init_weights(mix_seed(&[cfg.seed, INIT]));
    let mut edge_models = vec![global.clone(); n];
    let mut device_hist: Vec<Vec<SubmissionHistory>> = sc
        .topology
        .devices_per_edge()
        .iter()
        .map(|&j| (0..j).map(|_| new_history()).collect())
        .collect();
    let mut edge_hist: Vec<SubmissionHistory> = (0..n).map(|_| new_history()).collect();
    let mut net = ChainNetwork::new(n);

    // per-round additive latency L and the edge-round waiting period L_e
    let device_cost: f64 = devices
        .iter()
        .map(|&(i, j)| {
            let (m, p) = prof.device(i, j);
            2.0 * m + p
        })
        .sum();
    let edge_cost: f64 = (0..n).map(|i| 2.0 * prof.edge(i)).sum();
    let round_latency = k_rounds as f64 * device_cost + edge_cost;
    let edge_wait = prof.max_device_latency(&sc.topology);

    let mut records = Vec::with_capacity(t_rounds);
    let mut trajectory = Vec::with_capacity(t_rounds);
    let mut events = Vec::new();
    let mut statuses = Vec::new();
    let mut global_reports = Vec::with_capacity(t_rounds);
    let mut clock_time = 0.0;
    let mut latency = 0.0;
    let mut grad_sum = 0.0;
    let mut last_election: Option<ElectionOutcome> = None;

    for t in 1..=t_rounds {
        let round = |e: Error| e.in_round(t);
        let live: BTreeSet<usize> = (0..n)
            .filter(|&i| sc.stragglers.present_unchecked(ParticipantId::edge(i), t, 0))
            .collect();

        // 1. leader election, concurrent with training
        let reuse =
            cfg.chain.leader_tenure == LeaderTenure::Sticky && net.leader().is_some_and(|(l, _)| live.contains(&l));
        let (leader, term, election_latency) = if reuse {
            let (l, term) = net.leader().expect("checked");
            (l, term, 0.0)
        } else {
            let out = net
                .elect(&live, &election_cfg, mix_seed(&[cfg.seed, ELECTION, t as u64]))
                .map_err(round)?;
            let r = (out.leader, out.term, out.latency);
            last_election = Some(out);
            r
        };
        let election_done = clock_time + election_latency;
        events.push(SimEvent {
            round: t,
            time: election_done,
            kind: EventKind::ElectionComplete { leader, term },
        });

        // 2. timely edges start from the global model
        for &i in &live {
            edge_models[i] = global.clone();
        }

        // 3. K edge rounds
        let mut device_stragglers = 0;
        for k in 1..=k_rounds {
            let clock = RoundClock::new(t, k, k_rounds, t_rounds, t_c).map_err(round)?;
            let trained: Vec<Option<WeightVector>> = devices
                .par_iter()
                .map(|&(i, j)| {
                    if !sc.stragglers.present_unchecked(ParticipantId::device(i, j), t, k) {
                        return Ok(None);
                    }
                    let seed = mix_seed(&[cfg.seed, TRAIN, i as u64, j as u64, t as u64, k as u64]);
                    local_train(
                        &sc.task,
                        &edge_models[i],
                        sc.partition.shard(i, j),
                        &sc.lr,
                        &clock,
                        &cfg.train_config(seed),
                    )
                    .map(Some)
                })
                .collect::<Result<_>>()
                .map_err(round)?;
            let mut offset = 0;
            for i in 0..n {
                let j_i = sc.topology.devices(i);
                let subs = &trained[offset..offset + j_i];
                offset += j_i;
                let report = aggregate_tier(
                    method,
                    clock.flat_step(),
                    Tier::Edge { devices: j_i },
                    subs,
                    &mut device_hist[i],
                    &decay,
                    renormalize,
                );
                let report = match report {
                    Ok(r) => r,
                    // every device late under T_FedAvg: the edge model stands
                    Err(Error::EmptyAggregation) => {
                        device_stragglers += j_i;
                        for j in 0..j_i {
                            statuses.push(StatusEntry {
                                participant: ParticipantId::device(i, j),
                                t,
                                k,
                                status: Status::Excluded,
                            });
                        }
                        continue;
                    }
                    Err(e) => return Err(round(e)),
                };
                device_stragglers += j_i - report.count(Status::Timely);
                for (j, s) in report.statuses.iter().enumerate() {
                    statuses.push(StatusEntry {
                        participant: ParticipantId::device(i, j),
                        t,
                        k,
                        status: *s,
                    });
                }
                edge_models[i] = report.aggregate;
            }
        }

        // 4. submissions reach the leader once both training and election are done
        let submit_from = election_done.max(clock_time + k_rounds as f64 * edge_wait);
        let mut arrivals = submit_from;
        for &i in &live {
            let at = submit_from + prof.edge(i);
            arrivals = arrivals.max(at);
            events.push(SimEvent {
                round: t,
                time: at,
                kind: EventKind::EdgeSubmission { edge: i },
            });
        }

        // 5. global aggregation at the leader
        let subs: Vec<Option<WeightVector>> = (0..n)
            .map(|i| live.contains(&i).then(|| edge_models[i].clone()))
            .collect();
        let report = aggregate_tier(
            method,
            t as u64,
            Tier::Global(&sc.topology),
            &subs,
            &mut edge_hist,
            &decay,
            renormalize,
        )
        .map_err(round)?;
        for (i, s) in report.statuses.iter().enumerate() {
            statuses.push(StatusEntry {
                participant: ParticipantId::edge(i),
                t,
                k: 0,
                status: *s,
            });
        }
        global = report.aggregate.clone();
        events.push(SimEvent {
            round: t,
            time: arrivals,
            kind: EventKind::GlobalAggregation,
        });

        // 6. block creation and broadcast
        let payload = BlockPayload {
            leader,
            term,
            edges: (0..n)
                .map(|i| EdgeRecord {
                    edge: i,
                    status: report.statuses[i],
                    coefficient: report.coefficients[i],
                    weights: report.inputs[i].as_ref().map(|w| w.as_slice().to_vec()),
                })
                .collect(),
            global_model: global.as_slice().to_vec(),
            mass: report.mass,
        };
        let block = net
            .append_block(leader, term, t as u64, &payload, &live)
            .map_err(round)?;
        let appended = arrivals + msg;
        events.push(SimEvent {
            round: t,
            time: appended,
            kind: EventKind::BlockAppended { height: block.height },
        });
        clock_time = appended + msg;
        let l_bc = consensus_latency(election_latency, live.len(), msg, msg);

        // 7. metrics
        latency += round_latency;
        let g = gradient(&sc.task, &global, &train_all).map_err(round)?;
        grad_sum += g.norm_sq();
        records.push(MetricsRecord {
            round: t,
            global_loss: loss(&sc.task, &global, &train_all).map_err(round)?,
            test_loss: loss(&sc.task, &global, &sc.test).map_err(round)?,
            accuracy: accuracy(&sc.task, &global, &sc.test).map_err(round)?,
            grad_norm_sq_avg: grad_sum / t as f64,
            edge_stragglers: n - live.len(),
            device_stragglers,
            mass: report.mass,
            latency,
            consensus_latency: l_bc,
            block_height: block.height,
        });
        trajectory.push(global.clone());
        global_reports.push(report);
    }
    check_ordering(&events)?;

    let ledger = net.canonical().clone();
    let last = records.last();
    let summary = RunSummary {
        aggregator: method,
        seed: cfg.seed,
        global_rounds: t_rounds,
        edge_rounds: k_rounds,
        cold_boot: t_c,
        final_loss: last.map_or(f64::NAN, |r| r.global_loss),
        final_test_loss: last.map_or(f64::NAN, |r| r.test_loss),
        final_accuracy: last.and_then(|r| r.accuracy),
        total_latency: latency,
        mean_consensus_latency: records.iter().map(|r| r.consensus_latency).sum::<f64>() / t_rounds as f64,
        blocks: ledger.len(),
        tip_hash: hex::encode(ledger.tip_hash()),
        last_term: last_election.map_or(0, |e| e.term),
    };
    Ok(RunOutput {
        aggregator: method,
        final_model: global,
        trajectory,
        records,
        ledger,
        network: net,
        events,
        statuses,
        global_reports,
        device_histories: device_hist,
        edge_histories: edge_hist,
        summary,
    })
}

/// Writes the configured metrics, summary and ledger files.
pub fn write_outputs(cfg: &ExperimentConfig, out: &RunOutput) -> Result<()> {
    if let Some(p) = &cfg.output.metrics {
        write_metrics(&out.records, std::fs::File::create(p)?)?;
    }
    if let Some(p) = &cfg.output.summary {
        std::fs::write(p, out.summary.to_toml())?;
    }
    if let Some(p) = &cfg.output.ledger {
        let mut w = std::io::BufWriter::new(std::fs::File::create(p)?);
        out.ledger.export(&mut w)?;
        std::io::Write::flush(&mut w)?;
    }
    Ok(())
}
