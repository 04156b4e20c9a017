use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ParticipantId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Which applicability condition of a convergence bound failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Predicate {
    /// Learning-rate condition of the bound.
    LearningRate,
    /// The straggler term must be nonnegative.
    Nonnegativity,
    /// The common denominator must be strictly positive.
    Denominator,
}

impl std::fmt::Display for Predicate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Predicate::LearningRate => "learning-rate condition",
            Predicate::Nonnegativity => "nonnegativity condition",
            Predicate::Denominator => "positive-denominator condition",
        })
    }
}

/// Which constraint of the K optimisation ruled out the most candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Constraint {
    /// C1: convergence bound below the requirement.
    Convergence,
    /// C2: consensus latency within the waiting period.
    ConsensusLatency,
}

impl std::fmt::Display for Constraint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Constraint::Convergence => "C1 (convergence bound)",
            Constraint::ConsensusLatency => "C2 (consensus latency <= waiting period)",
        })
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },
    #[error("empty aggregation")]
    EmptyAggregation,
    #[error("non-finite value produced")]
    NonFinite,
    #[error("invalid topology: {0}")]
    Topology(String),
    #[error("invalid round clock: {0}")]
    Clock(String),
    #[error("partition infeasible: {0}")]
    PartitionInfeasible(String),
    #[error("no training data")]
    NoData,
    #[error("invalid task: {0}")]
    Task(String),
    #[error("infeasible straggler schedule: {0}")]
    InfeasibleSchedule(String),
    #[error("unknown participant {0}")]
    UnknownParticipant(ParticipantId),
    #[error("insufficient history: need {needed} entries, have {have}")]
    InsufficientHistory { needed: usize, have: usize },
    #[error("history rounds must strictly increase ({last} then {next})")]
    HistoryOrder { last: u64, next: u64 },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("schedule violation: {0}")]
    ScheduleViolation(String),
    #[error("leader election failed: {live} live of {total}, need {needed}")]
    ElectionFailure { live: usize, total: usize, needed: usize },
    #[error("node {node} is not the leader of term {term}")]
    Authority { node: usize, term: u64 },
    #[error("bound inapplicable: {0} violated")]
    BoundInapplicable(Predicate),
    #[error("no feasible K in 1..={k_max}; tighter constraint is {tighter}")]
    InfeasibleK { k_max: usize, tighter: Constraint },
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },
    #[error("round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("malformed ledger record at line {line}: {message}")]
    LedgerFormat { line: usize, message: String },
    #[error("malformed metrics file: {0}")]
    Metrics(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn in_round(self, round: usize) -> Self {
        match self {
            e @ Error::Round { .. } => e,
            e => Error::Round {
                round,
                source: Box::new(e),
            },
        }
    }

    /// True for errors caused by invalid user input rather than a failed run.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config { .. } | Error::Topology(_) | Error::Clock(_) | Error::Task(_) | Error::LedgerFormat { .. }
        )
    }
}
