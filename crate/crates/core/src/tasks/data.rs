//! Datasets, seed-determined synthetic generators and the label-skewed partitioner.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ParticipantId, Topology};
use crate::seed::mix_seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Target {
    Class(usize),
    Value(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub target: Target,
    /// Partition key: the class for classification, the generating cluster for regression.
    pub group: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    dim: usize,
    n_classes: Option<usize>,
    n_groups: usize,
}

impl Dataset {
    /// `n_classes` is `Some` for classification data and `None` for regression.
    pub fn new(samples: Vec<Sample>, dim: usize, n_classes: Option<usize>, n_groups: usize) -> Result<Self> {
        for (n, s) in samples.iter().enumerate() {
            if s.features.len() != dim {
                return Err(Error::Dimension {
                    expected: dim,
                    found: s.features.len(),
                });
            }
            if s.group >= n_groups {
                return Err(Error::Task(format!("sample {n}: group {} >= {n_groups}", s.group)));
            }
            match (s.target, n_classes) {
                (Target::Class(c), Some(nc)) if c < nc => {}
                (Target::Value(v), None) if v.is_finite() => {}
                _ => {
                    return Err(Error::Task(format!(
                        "sample {n}: target inconsistent with dataset kind"
                    )))
                }
            }
        }
        Ok(Self {
            samples,
            dim,
            n_classes,
            n_groups,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_classes(&self) -> Option<usize> {
        self.n_classes
    }

    pub fn n_groups(&self) -> usize {
        self.n_groups
    }

    /// Distinct groups present, ascending.
    pub fn groups_present(&self) -> Vec<usize> {
        let mut seen = vec![false; self.n_groups];
        for s in &self.samples {
            seen[s.group] = true;
        }
        (0..self.n_groups).filter(|&g| seen[g]).collect()
    }

    fn with_samples(&self, samples: Vec<Sample>) -> Dataset {
        Dataset {
            samples,
            dim: self.dim,
            n_classes: self.n_classes,
            n_groups: self.n_groups,
        }
    }

    /// Seeded shuffle then split; returns `(train, test)` with `round(fraction * len)` test samples.
    pub fn split(&self, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::Domain(format!("test fraction {test_fraction} outside [0, 1)")));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_test = (test_fraction * self.len() as f64).round() as usize;
        let pick = |ids: &[usize]| ids.iter().map(|&i| self.samples[i].clone()).collect();
        Ok((
            self.with_samples(pick(&idx[n_test..])),
            self.with_samples(pick(&idx[..n_test])),
        ))
    }

    /// Concatenation of several datasets with identical metadata.
    pub fn concat<'a>(parts: impl IntoIterator<Item = &'a Dataset>) -> Option<Dataset> {
        let mut iter = parts.into_iter();
        let first = iter.next()?;
        let mut samples = first.samples.clone();
        for p in iter {
            samples.extend(p.samples.iter().cloned());
        }
        Some(first.with_samples(samples))
    }
}

/// Gaussian class clusters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticClassification {
    pub n_samples: usize,
    pub n_classes: usize,
    pub dim: usize,
    /// Standard deviation of class-mean coordinates.
    pub separation: f64,
    /// Within-class standard deviation.
    pub noise: f64,
}

impl SyntheticClassification {
    pub fn generate(&self, seed: u64) -> Result<Dataset> {
        if self.n_classes == 0 || self.dim == 0 {
            return Err(Error::Task("classification data needs >= 1 class and dim >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centre = normal(self.separation)?;
        let spread = normal(self.noise)?;
        let means: Vec<Vec<f64>> = (0..self.n_classes)
            .map(|_| (0..self.dim).map(|_| centre.sample(&mut rng)).collect())
            .collect();
        let samples = (0..self.n_samples)
            .map(|n| {
                let class = n % self.n_classes;
                Sample {
                    features: means[class].iter().map(|m| m + spread.sample(&mut rng)).collect(),
                    target: Target::Class(class),
                    group: class,
                }
            })
            .collect();
        Dataset::new(samples, self.dim, Some(self.n_classes), self.n_classes)
    }
}

/// Linear model plus noise, with features drawn around per-group centres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticRegression {
    pub n_samples: usize,
    pub dim: usize,
    pub n_groups: usize,
    /// Standard deviation of group-centre coordinates (covariate shift between groups).
    pub group_shift: f64,
    /// Standard deviation of per-group perturbations of the true coefficients.
    pub concept_shift: f64,
    /// Observation noise standard deviation.
    pub noise: f64,
}

impl SyntheticRegression {
    pub fn generate(&self, seed: u64) -> Result<Dataset> {
        if self.n_groups == 0 || self.dim == 0 {
            return Err(Error::Task("regression data needs >= 1 group and dim >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let unit = normal(1.0)?;
        let shift = normal(self.group_shift)?;
        let concept = normal(self.concept_shift)?;
        let noise = normal(self.noise)?;
        let coef: Vec<f64> = (0..self.dim).map(|_| unit.sample(&mut rng)).collect();
        let bias = unit.sample(&mut rng);
        let centres: Vec<Vec<f64>> = (0..self.n_groups)
            .map(|_| (0..self.dim).map(|_| shift.sample(&mut rng)).collect())
            .collect();
        let group_coef: Vec<Vec<f64>> = (0..self.n_groups)
            .map(|_| coef.iter().map(|c| c + concept.sample(&mut rng)).collect())
            .collect();
        let samples = (0..self.n_samples)
            .map(|n| {
                let g = n % self.n_groups;
                let x: Vec<f64> = centres[g].iter().map(|c| c + unit.sample(&mut rng)).collect();
                let y = x.iter().zip(&group_coef[g]).map(|(a, b)| a * b).sum::<f64>() + bias + noise.sample(&mut rng);
                Sample {
                    features: x,
                    target: Target::Value(y),
                    group: g,
                }
            })
            .collect();
        Dataset::new(samples, self.dim, None, self.n_groups)
    }
}

fn normal(std: f64) -> Result<Normal<f64>> {
    Normal::new(0.0, std).map_err(|e| Error::Domain(format!("normal std {std}: {e}")))
}

/// One shard per device, indexed `[edge][device]`.
#[derive(Debug, Clone)]
pub struct Partition {
    shards: Vec<Vec<Dataset>>,
}

impl Partition {
    pub fn shard(&self, edge: usize, device: usize) -> &Dataset {
        &self.shards[edge][device]
    }

    pub fn get(&self, id: ParticipantId) -> Option<&Dataset> {
        match id {
            ParticipantId::Device { edge, device } => self.shards.get(edge)?.get(device),
            ParticipantId::Edge { .. } => None,
        }
    }

    pub fn edge_shards(&self, edge: usize) -> &[Dataset] {
        &self.shards[edge]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParticipantId, &Dataset)> {
        self.shards.iter().enumerate().flat_map(|(edge, row)| {
            row.iter()
                .enumerate()
                .map(move |(device, d)| (ParticipantId::device(edge, device), d))
        })
    }
}

/// Label-skewed split: every device draws its samples from at most
/// `classes_per_device` groups.
///
/// The device with edge-major index `d` takes its `r`-th slot from group
/// `perm[(d * c + r) % G]`; each group's samples are shuffled and cut into as
/// many near-equal chunks as it has slots. With `c == G` every device sees
/// every group.
pub fn partition_non_iid(
    dataset: &Dataset,
    topology: &Topology,
    classes_per_device: usize,
    seed: u64,
) -> Result<Partition> {
    if classes_per_device == 0 {
        return Err(Error::Domain("classes_per_device must be >= 1".into()));
    }
    if dataset.is_empty() {
        return Err(Error::NoData);
    }
    let mut groups = dataset.groups_present();
    groups.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0x9a17])));
    let g = groups.len();
    let c = classes_per_device.min(g);
    let m = topology.total_devices();

    let slot_group = |slot: usize| groups[slot % g];
    let mut slots_per_group = vec![0usize; dataset.n_groups()];
    for slot in 0..m * c {
        slots_per_group[slot_group(slot)] += 1;
    }

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); dataset.n_groups()];
    for (n, s) in dataset.samples().iter().enumerate() {
        members[s.group].push(n);
    }
    // chunks[group] is consumed front to back in slot order
    let mut chunks: Vec<std::collections::VecDeque<Vec<usize>>> = vec![Default::default(); dataset.n_groups()];
    for &grp in &groups {
        let slots = slots_per_group[grp];
        let pool = &mut members[grp];
        if pool.len() < slots {
            return Err(Error::PartitionInfeasible(format!(
                "group {grp} has {} samples for {slots} shards",
                pool.len()
            )));
        }
        pool.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[seed, grp as u64])));
        let (base, extra) = (pool.len() / slots, pool.len() % slots);
        let mut start = 0;
        for s in 0..slots {
            let len = base + usize::from(s < extra);
            chunks[grp].push_back(pool[start..start + len].to_vec());
            start += len;
        }
    }

    let mut shards = Vec::with_capacity(topology.n_edges());
    let mut d = 0;
    for &j in topology.devices_per_edge() {
        let mut row = Vec::with_capacity(j);
        for _ in 0..j {
            let mut idx = Vec::new();
            for r in 0..c {
                let grp = slot_group(d * c + r);
                idx.extend(chunks[grp].pop_front().expect("slot counted above"));
            }
            row.push(dataset.with_samples(idx.iter().map(|&n| dataset.samples()[n].clone()).collect()));
            d += 1;
        }
        shards.push(row);
    }
    Ok(Partition { shards })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn classes(n_samples: usize, n_classes: usize, seed: u64) -> Dataset {
        SyntheticClassification {
            n_samples,
            n_classes,
            dim: 3,
            separation: 2.0,
            noise: 0.5,
        }
        .generate(seed)
        .unwrap()
    }

    fn labels(d: &Dataset) -> BTreeSet<usize> {
        d.samples().iter().map(|s| s.group).collect()
    }

    /// Samples are identified by their exact feature bits.
    fn fingerprints(d: &Dataset) -> Vec<Vec<u64>> {
        d.samples()
            .iter()
            .map(|s| s.features.iter().map(|v| v.to_bits()).collect())
            .collect()
    }

    #[test]
    fn one_class_per_device_is_a_bijection() {
        let data = classes(400, 4, 1);
        let topo = Topology::uniform(2, 2).unwrap();
        let p = partition_non_iid(&data, &topo, 1, 5).unwrap();
        let mut seen = BTreeSet::new();
        for (_, shard) in p.iter() {
            let l = labels(shard);
            assert_eq!(l.len(), 1);
            seen.extend(l);
            assert_eq!(shard.len(), 100);
        }
        assert_eq!(seen.len(), 4);
    }

    #[test]
    fn all_classes_per_device_reaches_every_device() {
        let data = classes(400, 4, 2);
        let topo = Topology::uniform(2, 2).unwrap();
        let p = partition_non_iid(&data, &topo, 4, 5).unwrap();
        for (_, shard) in p.iter() {
            assert_eq!(labels(shard).len(), 4);
        }
    }

    #[test]
    fn basic_setting_shards_have_single_labels_and_are_disjoint() {
        let data = classes(2000, 10, 3);
        let topo = Topology::uniform(5, 5).unwrap();
        let p = partition_non_iid(&data, &topo, 1, 11).unwrap();
        let mut all = BTreeSet::new();
        let mut total = 0;
        for (_, shard) in p.iter() {
            assert!(labels(shard).len() <= 1);
            for f in fingerprints(shard) {
                assert!(all.insert(f), "sample assigned twice");
                total += 1;
            }
        }
        assert_eq!(p.iter().count(), 25);
        assert!(total <= data.len());
    }

    #[test]
    fn partition_is_deterministic_in_seed() {
        let data = classes(300, 5, 4);
        let topo = Topology::new(vec![3, 2]).unwrap();
        let a = partition_non_iid(&data, &topo, 2, 9).unwrap();
        let b = partition_non_iid(&data, &topo, 2, 9).unwrap();
        for ((_, x), (_, y)) in a.iter().zip(b.iter()) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn too_many_devices_is_infeasible() {
        let data = classes(4, 2, 1);
        let topo = Topology::uniform(3, 3).unwrap();
        assert!(matches!(
            partition_non_iid(&data, &topo, 1, 0),
            Err(Error::PartitionInfeasible(_))
        ));
    }

    #[test]
    fn split_sizes() {
        let data = classes(100, 2, 1);
        let (train, test) = data.split(0.2, 3).unwrap();
        assert_eq!((train.len(), test.len()), (80, 20));
    }

    #[test]
    fn dataset_rejects_bad_labels() {
        let s = Sample {
            features: vec![0.0],
            target: Target::Class(3),
            group: 0,
        };
        assert!(Dataset::new(vec![s], 1, Some(2), 1).is_err());
    }
}
