use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hieavg::Aggregator;

/// Column order of the metrics file.
pub const METRICS_HEADER: [&str; 11] = [
    "round",
    "global_loss",
    "test_loss",
    "accuracy",
    "grad_norm_sq_avg",
    "edge_stragglers",
    "device_stragglers",
    "mass",
    "latency",
    "consensus_latency",
    "block_height",
];

/// One row per global round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub round: usize,
    /// Loss of the global model over all training shards.
    pub global_loss: f64,
    pub test_loss: f64,
    /// Held-out accuracy; empty for regression.
    pub accuracy: Option<f64>,
    /// Running mean of the squared global gradient norm.
    pub grad_norm_sq_avg: f64,
    /// `S^t`
    pub edge_stragglers: usize,
    /// Late devices summed over edges and edge rounds.
    pub device_stragglers: usize,
    /// Coefficient mass of the global aggregation.
    pub mass: f64,
    /// Cumulative simulated latency (s).
    pub latency: f64,
    /// `L_bc` of this round (s).
    pub consensus_latency: f64,
    pub block_height: u64,
}

pub fn write_metrics<W: Write>(records: &[MetricsRecord], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(METRICS_HEADER)
        .map_err(|e| Error::Metrics(e.to_string()))?;
    for r in records {
        w.serialize(r).map_err(|e| Error::Metrics(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics<R: Read>(input: R) -> Result<Vec<MetricsRecord>> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers().map_err(|e| Error::Metrics(e.to_string()))?;
    if header.iter().ne(METRICS_HEADER) {
        return Err(Error::Metrics(format!("unexpected header {header:?}")));
    }
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Metrics(e.to_string())))
        .collect()
}

/// Run-level summary written next to the metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub aggregator: Aggregator,
    pub seed: u64,
    pub global_rounds: usize,
    pub edge_rounds: usize,
    pub cold_boot: usize,
    pub final_loss: f64,
    pub final_test_loss: f64,
    pub final_accuracy: Option<f64>,
    pub total_latency: f64,
    pub mean_consensus_latency: f64,
    pub blocks: usize,
    pub tip_hash: String,
    pub last_term: u64,
}

impl RunSummary {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("summary serializes")
    }
}
