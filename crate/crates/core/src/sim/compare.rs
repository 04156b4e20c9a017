use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{run_scenario, ExperimentConfig, RunOutput, Scenario};
use crate::error::{Error, Result};
use crate::hieavg::Aggregator;

/// Runs of several aggregators over one shared scenario.
#[derive(Debug, Clone)]
pub struct Comparison {
    pub runs: Vec<RunOutput>,
}

impl Comparison {
    pub fn aggregators(&self) -> Vec<Aggregator> {
        self.runs.iter().map(|r| r.aggregator).collect()
    }

    pub fn final_loss(&self, method: Aggregator) -> Option<f64> {
        self.runs
            .iter()
            .find(|r| r.aggregator == method)
            .map(|r| r.summary.final_loss)
    }

    /// `round,<name>_loss,...` with one row per global round.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["round".to_string()];
        header.extend(self.runs.iter().map(|r| format!("{}_loss", r.aggregator.name())));
        w.write_record(&header).map_err(|e| Error::Metrics(e.to_string()))?;
        let rounds = self.runs.first().map_or(0, |r| r.records.len());
        for t in 0..rounds {
            let mut row = vec![(t + 1).to_string()];
            row.extend(self.runs.iter().map(|r| r.records[t].global_loss.to_string()));
            w.write_record(&row).map_err(|e| Error::Metrics(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Every aggregator sees the same data, shards, seeds and straggler pattern;
/// the oracle sees the same scenario with nobody late.
pub fn compare_aggregators(cfg: &ExperimentConfig, methods: &[Aggregator]) -> Result<Comparison> {
    if methods.is_empty() {
        return Err(Error::config("aggregators", "at least one aggregator is required"));
    }
    let scenario = Scenario::build(cfg)?;
    let clean = scenario.without_stragglers();
    let runs = methods
        .par_iter()
        .map(|&m| match m {
            Aggregator::OracleNoStragglers => run_scenario(cfg, &clean, m),
            _ => run_scenario(cfg, &scenario, m),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Comparison { runs })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Devices per edge `J`.
    Devices,
    /// Edge servers `N`.
    Edges,
    /// Edge rounds `K`.
    EdgeRounds,
    /// Late edges per global round.
    EdgeStragglers,
    /// Late devices per edge per edge round.
    DeviceStragglers,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "j" | "devices" => Ok(Self::Devices),
            "n" | "edges" => Ok(Self::Edges),
            "k" | "edge_rounds" => Ok(Self::EdgeRounds),
            "s" | "edge_stragglers" => Ok(Self::EdgeStragglers),
            "s_i" | "device_stragglers" => Ok(Self::DeviceStragglers),
            _ => Err(Error::config("sweep", format!("unknown sweep axis `{s}`"))),
        }
    }
}

impl SweepAxis {
    pub fn apply(&self, cfg: &ExperimentConfig, value: usize) -> ExperimentConfig {
        let mut c = cfg.clone();
        match self {
            SweepAxis::Devices => {
                c.topology.devices_per_edge = value;
                c.topology.devices = None;
            }
            SweepAxis::Edges => {
                c.topology.n_edges = value;
                c.topology.devices = None;
            }
            SweepAxis::EdgeRounds => c.rounds.edge = value,
            SweepAxis::EdgeStragglers => c.stragglers.edge_count = value,
            SweepAxis::DeviceStragglers => c.stragglers.device_count = value,
        }
        c
    }
}

#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub axis: SweepAxis,
    pub value: usize,
    pub comparison: Comparison,
}

/// One comparison per value, computed in parallel.
pub fn sweep(
    cfg: &ExperimentConfig,
    axis: SweepAxis,
    values: &[usize],
    methods: &[Aggregator],
) -> Result<Vec<SweepPoint>> {
    values
        .par_iter()
        .map(|&v| {
            compare_aggregators(&axis.apply(cfg, v), methods).map(|comparison| SweepPoint {
                axis,
                value: v,
                comparison,
            })
        })
        .collect()
}
