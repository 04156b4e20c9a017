//! TOML experiment configuration. Every table is optional; omitted keys take
//! the basic setting (5 edges x 5 devices, K = 2, γ0 = λ = 0.9, one straggler
//! per tier). Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::chain::ElectionConfig;
use crate::error::{Error, Result};
use crate::hieavg::{Aggregator, DecayParams, DeltaWindow};
use crate::latency::{BoundParams, ChannelParams, LatencyProfile};
use crate::model::Topology;
use crate::straggler::StragglerSpec;
use crate::tasks::{LocalTrainConfig, LrSchedule, TaskKind, TaskSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TopologyConfig {
    pub n_edges: usize,
    pub devices_per_edge: usize,
    /// Explicit per-edge device counts; overrides the two fields above.
    pub devices: Option<Vec<usize>>,
}

impl Default for TopologyConfig {
    fn default() -> Self {
        Self {
            n_edges: 5,
            devices_per_edge: 5,
            devices: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoundsConfig {
    /// T
    pub global: usize,
    /// K
    pub edge: usize,
    /// T_c
    pub cold_boot: usize,
}

impl Default for RoundsConfig {
    fn default() -> Self {
        Self {
            global: 80,
            edge: 2,
            cold_boot: 2,
        }
    }
}

/// Model and synthetic-data generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub kind: TaskKind,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub n_classes: usize,
    pub n_samples: usize,
    pub noise: f64,
    /// Distance scale between class means (classification).
    pub separation: f64,
    /// Generating clusters (regression).
    pub n_groups: usize,
    pub group_shift: f64,
    pub concept_shift: f64,
    /// Label groups held by each device.
    pub classes_per_device: usize,
    pub test_fraction: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            kind: TaskKind::LinearRegression,
            input_dim: 8,
            hidden_dim: 16,
            n_classes: 5,
            n_samples: 4000,
            noise: 0.5,
            separation: 2.0,
            n_groups: 5,
            group_shift: 1.0,
            concept_shift: 0.5,
            classes_per_device: 1,
            test_fraction: 0.2,
        }
    }
}

impl TaskConfig {
    pub fn spec(&self) -> TaskSpec {
        match self.kind {
            TaskKind::LinearRegression => TaskSpec::linear_regression(self.input_dim),
            TaskKind::SoftmaxClassifier => TaskSpec::softmax(self.input_dim, self.n_classes),
            TaskKind::OneHiddenMlp => TaskSpec::mlp(self.input_dim, self.hidden_dim, self.n_classes),
        }
    }
}

/// `rate(t, k) = 1 / (eta0 + decay (tK + k))` with mini-batch SGD.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub eta0: f64,
    pub decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            eta0: 20.0,
            decay: 0.05,
            batch_size: 32,
            epochs: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AggregationConfig {
    pub gamma0: f64,
    pub lambda: f64,
    /// Rescale HieAvg coefficients to sum to one.
    pub renormalize: bool,
    pub window: DeltaWindow,
    /// Stored history entries per participant; `None` keeps all.
    pub history_cap: Option<usize>,
}

impl Default for AggregationConfig {
    fn default() -> Self {
        let d = DecayParams::default();
        Self {
            gamma0: d.gamma0,
            lambda: d.lambda,
            renormalize: false,
            window: DeltaWindow::All,
            history_cap: None,
        }
    }
}

impl AggregationConfig {
    pub fn decay(&self) -> DecayParams {
        DecayParams {
            gamma0: self.gamma0,
            lambda: self.lambda,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeaderTenure {
    /// Fresh election every global round.
    #[default]
    PerRound,
    /// Keep the leader while it stays live.
    Sticky,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChainConfig {
    pub election: ElectionConfig,
    pub leader_tenure: LeaderTenure,
}

/// Inputs of the `K` optimiser and the convergence-bound evaluators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizeConfig {
    /// Required Ω̄.
    pub omega_target: Option<f64>,
    /// `L_bc`; measured from a calibration run when absent.
    pub consensus_latency: Option<f64>,
    pub k_max: usize,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        Self {
            omega_target: None,
            consensus_latency: None,
            k_max: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub metrics: Option<PathBuf>,
    pub summary: Option<PathBuf>,
    pub ledger: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub aggregator: Aggregator,
    pub topology: TopologyConfig,
    pub rounds: RoundsConfig,
    pub task: TaskConfig,
    pub training: TrainingConfig,
    pub aggregation: AggregationConfig,
    pub stragglers: StragglerSpec,
    pub chain: ChainConfig,
    pub latency: LatencyProfile,
    /// When set, device latencies come from the channel model.
    pub channel: Option<ChannelParams>,
    /// Supplied bound constants; estimated from a calibration run when absent.
    pub bounds: Option<BoundParams>,
    pub optimize: OptimizeConfig,
    pub output: OutputConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            aggregator: Aggregator::HieAvg,
            topology: TopologyConfig::default(),
            rounds: RoundsConfig::default(),
            task: TaskConfig::default(),
            training: TrainingConfig::default(),
            aggregation: AggregationConfig::default(),
            stragglers: StragglerSpec::default(),
            chain: ChainConfig::default(),
            latency: LatencyProfile::default(),
            channel: None,
            bounds: None,
            optimize: OptimizeConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

fn check(ok: bool, path: &str, message: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::config(path, message))
    }
}

fn prefixed(path: &str, e: Error) -> Error {
    match e {
        Error::Domain(m) | Error::Task(m) | Error::Topology(m) => Error::config(path, m),
        e @ Error::Config { .. } => e,
        e => Error::config(path, e.to_string()),
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            Error::config(
                "<config>",
                e.message().to_string() + &e.span().map(|s| format!(" (at byte {})", s.start)).unwrap_or_default(),
            )
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config { path: key, message } if key == "<config>" => Error::Config {
                path: path.display().to_string(),
                message,
            },
            e => e,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn topology(&self) -> Result<Topology> {
        let counts = match &self.topology.devices {
            Some(v) => v.clone(),
            None => vec![self.topology.devices_per_edge; self.topology.n_edges],
        };
        Topology::new(counts).map_err(|e| prefixed("topology", e))
    }

    pub fn schedule(&self) -> Result<LrSchedule> {
        LrSchedule::new(self.training.eta0, self.training.decay, self.rounds.edge).map_err(|e| prefixed("training", e))
    }

    pub fn train_config(&self, seed: u64) -> LocalTrainConfig {
        LocalTrainConfig {
            batch_size: self.training.batch_size,
            epochs: self.training.epochs,
            seed,
        }
    }

    /// Device latencies from the channel model when one is given.
    pub fn latency_profile(&self) -> Result<LatencyProfile> {
        match &self.channel {
            None => Ok(self.latency.clone()),
            Some(c) => {
                let mut p =
                    LatencyProfile::from_channel(c, self.latency.edge_comm).map_err(|e| prefixed("channel", e))?;
                p.overrides = self.latency.overrides.clone();
                Ok(p)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let topo = self.topology()?;
        let r = &self.rounds;
        check(r.cold_boot >= 2, "rounds.cold_boot", "T_c must be ≥ 2")?;
        check(r.edge >= 1, "rounds.edge", "K must be ≥ 1")?;
        check(r.global > r.cold_boot, "rounds.global", "T must exceed T_c")?;
        self.task.spec().validate().map_err(|e| prefixed("task", e))?;
        let t = &self.task;
        check(t.n_samples > 0, "task.n_samples", "must be ≥ 1")?;
        check(t.classes_per_device >= 1, "task.classes_per_device", "must be ≥ 1")?;
        check(
            t.test_fraction > 0.0 && t.test_fraction < 1.0,
            "task.test_fraction",
            "must lie in (0, 1)",
        )?;
        check(t.noise >= 0.0, "task.noise", "must be ≥ 0")?;
        check(t.n_groups >= 1, "task.n_groups", "must be ≥ 1")?;
        self.schedule()?;
        check(self.training.batch_size >= 1, "training.batch_size", "must be ≥ 1")?;
        self.aggregation
            .decay()
            .validate()
            .map_err(|e| prefixed("aggregation", e))?;
        if let DeltaWindow::LastN(n) = self.aggregation.window {
            check(n >= 1, "aggregation.window", "last_n must be ≥ 1")?;
        }
        if let Some(c) = self.aggregation.history_cap {
            check(c >= 2, "aggregation.history_cap", "must be ≥ 2")?;
        }
        let s = &self.stragglers;
        check(
            s.edge_count <= topo.n_edges(),
            "stragglers.edge_count",
            "exceeds the number of edge servers",
        )?;
        check(
            topo.devices_per_edge().iter().all(|&j| s.device_count <= j),
            "stragglers.device_count",
            "exceeds the devices of some edge server",
        )?;
        check(
            (0.0..=1.0).contains(&s.probability),
            "stragglers.probability",
            "must lie in [0, 1]",
        )?;
        self.chain.election.validate()?;
        self.latency.validate().map_err(|e| prefixed("latency", e))?;
        for o in &self.latency.overrides {
            check(
                topo.contains(o.participant),
                "latency.overrides",
                &format!("unknown participant {}", o.participant),
            )?;
        }
        if let Some(c) = &self.channel {
            c.validate().map_err(|e| prefixed("channel", e))?;
        }
        if let Some(b) = &self.bounds {
            b.validate().map_err(|e| prefixed("bounds", e))?;
        }
        if let Some(o) = self.optimize.omega_target {
            check(o > 0.0, "optimize.omega_target", "must be > 0")?;
        }
        if let Some(l) = self.optimize.consensus_latency {
            check(l >= 0.0, "optimize.consensus_latency", "must be ≥ 0")?;
        }
        check(self.optimize.k_max >= 1, "optimize.k_max", "must be ≥ 1")?;
        Ok(())
    }
}
