//! Mini-batch SGD local update with the dynamic learning-rate schedule.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::Dataset;
use super::nn::{gradient_on, TaskSpec};
use crate::error::{Error, Result};
use crate::model::{RoundClock, WeightVector};

/// `rate(t, k) = 1 / (eta0 + decay * (t*K + k))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub eta0: f64,
    pub decay: f64,
    pub edge_rounds: usize,
}

impl LrSchedule {
    pub fn new(eta0: f64, decay: f64, edge_rounds: usize) -> Result<Self> {
        if !(eta0 > 0.0 && eta0.is_finite()) {
            return Err(Error::Domain(format!("eta0 must be > 0, got {eta0}")));
        }
        if !(decay >= 0.0 && decay.is_finite()) {
            return Err(Error::Domain(format!("decay must be >= 0, got {decay}")));
        }
        if edge_rounds == 0 {
            return Err(Error::Domain("edge_rounds must be >= 1".into()));
        }
        Ok(Self {
            eta0,
            decay,
            edge_rounds,
        })
    }

    pub fn rate(&self, t: usize, k: usize) -> f64 {
        1.0 / (self.eta0 + self.decay * (t * self.edge_rounds + k) as f64)
    }

    /// Mean rate over every `(t, k)` of a `global_rounds`-round horizon.
    pub fn mean_rate(&self, global_rounds: usize) -> f64 {
        let n = global_rounds * self.edge_rounds;
        let sum: f64 = (1..=global_rounds)
            .flat_map(|t| (1..=self.edge_rounds).map(move |k| (t, k)))
            .map(|(t, k)| self.rate(t, k))
            .sum();
        sum / n.max(1) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocalTrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

/// Runs `cfg.epochs` shuffled passes of mini-batch SGD at the fixed rate
/// `schedule.rate(t, k)`. A trailing partial batch is kept; a batch size
/// above the shard size means one full-shard batch per epoch.
pub fn local_train(
    task: &TaskSpec,
    w_in: &WeightVector,
    shard: &Dataset,
    schedule: &LrSchedule,
    clock: &RoundClock,
    cfg: &LocalTrainConfig,
) -> Result<WeightVector> {
    if w_in.len() != task.dim() {
        return Err(Error::Dimension {
            expected: task.dim(),
            found: w_in.len(),
        });
    }
    if shard.is_empty() {
        return Err(Error::NoData);
    }
    if cfg.batch_size == 0 {
        return Err(Error::Domain("batch_size must be >= 1".into()));
    }
    let eta = schedule.rate(clock.t, clock.k);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut w = w_in.as_slice().to_vec();
    let mut order: Vec<usize> = (0..shard.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let g = gradient_on(task, &w, batch.iter().map(|&i| &shard.samples()[i]));
            for (wi, gi) in w.iter_mut().zip(&g) {
                *wi -= eta * gi;
            }
        }
    }
    WeightVector::new(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::data::{Sample, SyntheticRegression, Target};
    use crate::tasks::nn::{gradient, loss};

    fn clock(t: usize, k: usize) -> RoundClock {
        RoundClock::new(t, k, 2, 500, 2).unwrap()
    }

    #[test]
    fn rate_monotonicity() {
        let s = LrSchedule::new(10.0, 0.5, 2).unwrap();
        let mut prev = f64::INFINITY;
        for t in 1..20 {
            for k in 1..=2 {
                let r = s.rate(t, k);
                assert!(r > 0.0 && r < prev);
                prev = r;
            }
        }
        let flat = LrSchedule::new(4.0, 0.0, 2).unwrap();
        assert_eq!(flat.rate(1, 1), 0.25);
        assert_eq!(flat.rate(30, 2), 0.25);
        assert!(LrSchedule::new(0.0, 0.1, 2).is_err());
    }

    #[test]
    fn zero_epochs_is_identity() {
        let data = SyntheticRegression {
            n_samples: 10,
            dim: 2,
            n_groups: 1,
            group_shift: 0.0,
            concept_shift: 0.0,
            noise: 0.1,
        }
        .generate(2)
        .unwrap();
        let task = TaskSpec::linear_regression(2);
        let w = WeightVector::new(vec![0.1, 0.2, 0.3]).unwrap();
        let cfg = LocalTrainConfig {
            batch_size: 4,
            epochs: 0,
            seed: 1,
        };
        let sched = LrSchedule::new(10.0, 0.0, 2).unwrap();
        assert_eq!(local_train(&task, &w, &data, &sched, &clock(1, 1), &cfg).unwrap(), w);
    }

    #[test]
    fn single_step_matches_hand_update() {
        let s = Sample {
            features: vec![1.0, -2.0],
            target: Target::Value(3.0),
            group: 0,
        };
        let data = Dataset::new(vec![s], 2, None, 1).unwrap();
        let task = TaskSpec::linear_regression(2);
        let w = WeightVector::new(vec![0.5, 0.5, 0.0]).unwrap();
        let sched = LrSchedule::new(5.0, 1.0, 2).unwrap();
        let c = clock(1, 1);
        // eta = 1/(5 + 1*(1*2+1)) = 1/8; pred = 0.5 - 1 = -0.5; r = 2*(-0.5-3) = -7
        let eta = 1.0 / 8.0;
        let expected = [0.5 - eta * (-7.0), 0.5 - eta * 14.0, 0.0 - eta * (-7.0)];
        let cfg = LocalTrainConfig {
            batch_size: 1,
            epochs: 1,
            seed: 0,
        };
        let out = local_train(&task, &w, &data, &sched, &c, &cfg).unwrap();
        for (a, b) in out.as_slice().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        let g = gradient(&task, &w, &data).unwrap();
        let via_axpy = WeightVector::axpy(-eta, &g, &w).unwrap();
        assert_eq!(out, via_axpy);
    }

    #[test]
    fn empty_shard_is_no_data() {
        let data = Dataset::new(vec![], 2, None, 1).unwrap();
        let task = TaskSpec::linear_regression(2);
        let cfg = LocalTrainConfig {
            batch_size: 1,
            epochs: 1,
            seed: 0,
        };
        let sched = LrSchedule::new(5.0, 1.0, 2).unwrap();
        assert!(matches!(
            local_train(&task, &WeightVector::zeros(3), &data, &sched, &clock(1, 1), &cfg),
            Err(Error::NoData)
        ));
    }

    #[test]
    fn training_is_deterministic() {
        let data = SyntheticRegression {
            n_samples: 64,
            dim: 3,
            n_groups: 2,
            group_shift: 1.0,
            concept_shift: 0.0,
            noise: 0.1,
        }
        .generate(3)
        .unwrap();
        let task = TaskSpec::linear_regression(3);
        let sched = LrSchedule::new(10.0, 0.1, 2).unwrap();
        let cfg = LocalTrainConfig {
            batch_size: 8,
            epochs: 2,
            seed: 42,
        };
        let w0 = WeightVector::zeros(4);
        let a = local_train(&task, &w0, &data, &sched, &clock(2, 1), &cfg).unwrap();
        let b = local_train(&task, &w0, &data, &sched, &clock(2, 1), &cfg).unwrap();
        let bits = |w: &WeightVector| w.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert!(loss(&task, &a, &data).unwrap() < loss(&task, &w0, &data).unwrap());
    }
}
