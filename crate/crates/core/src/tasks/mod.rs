//! Learning tasks: synthetic data, non-IID partitioning, losses and the local SGD update.

mod data;
mod nn;
mod train;

pub use data::{partition_non_iid, Dataset, Partition, Sample, SyntheticClassification, SyntheticRegression, Target};
pub use nn::{accuracy, gradient, loss, TaskKind, TaskSpec};
pub use train::{local_train, LocalTrainConfig, LrSchedule};
