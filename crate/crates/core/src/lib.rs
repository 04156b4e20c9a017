//! Simulator and library for blockchain-coordinated hierarchical federated
//! learning with straggler-tolerant aggregation (HieAvg), a Raft-style
//! consortium chain and a latency model for choosing the number of edge
//! aggregation rounds.

pub mod chain;
pub mod error;
pub mod hieavg;
pub mod latency;
pub mod model;
pub mod seed;
pub mod sim;
pub mod straggler;
pub mod tasks;

pub use error::{Error, Result};
pub use model::{weighted_mean, ParticipantId, RoundClock, Topology, WeightVector};
