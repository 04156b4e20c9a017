//! The three differentiable tasks and their hand-written gradients.
//!
//! Parameter layouts (row-major):
//! * linear regression: `[w (D), b]`
//! * softmax classifier: `[W (C x D), b (C)]`
//! * one-hidden-layer MLP (tanh): `[W1 (H x D), b1 (H), W2 (C x H), b2 (C)]`

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::data::{Dataset, Sample, Target};
use crate::error::{Error, Result};
use crate::model::WeightVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    LinearRegression,
    SoftmaxClassifier,
    OneHiddenMlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden_dim: usize,
}

impl TaskSpec {
    pub fn linear_regression(input_dim: usize) -> Self {
        Self {
            kind: TaskKind::LinearRegression,
            input_dim,
            output_dim: 1,
            hidden_dim: 0,
        }
    }

    pub fn softmax(input_dim: usize, n_classes: usize) -> Self {
        Self {
            kind: TaskKind::SoftmaxClassifier,
            input_dim,
            output_dim: n_classes,
            hidden_dim: 0,
        }
    }

    pub fn mlp(input_dim: usize, hidden_dim: usize, n_classes: usize) -> Self {
        Self {
            kind: TaskKind::OneHiddenMlp,
            input_dim,
            output_dim: n_classes,
            hidden_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Task("input_dim must be >= 1".into()));
        }
        match self.kind {
            TaskKind::LinearRegression if self.output_dim != 1 => {
                Err(Error::Task("linear regression has output_dim 1".into()))
            }
            TaskKind::SoftmaxClassifier | TaskKind::OneHiddenMlp if self.output_dim < 2 => {
                Err(Error::Task("classifiers need output_dim >= 2".into()))
            }
            TaskKind::OneHiddenMlp if self.hidden_dim == 0 => Err(Error::Task("MLP needs hidden_dim >= 1".into())),
            _ => Ok(()),
        }
    }

    pub fn is_classifier(&self) -> bool {
        self.kind != TaskKind::LinearRegression
    }

    /// Exact parameter count `d`.
    pub fn dim(&self) -> usize {
        let (d, c, h) = (self.input_dim, self.output_dim, self.hidden_dim);
        match self.kind {
            TaskKind::LinearRegression => d + 1,
            TaskKind::SoftmaxClassifier => c * (d + 1),
            TaskKind::OneHiddenMlp => h * d + h + c * h + c,
        }
    }

    /// Zeros for the convex tasks; scaled Gaussian weights and zero biases for the MLP.
    pub fn init_weights(&self, seed: u64) -> WeightVector {
        if self.kind != TaskKind::OneHiddenMlp {
            return WeightVector::zeros(self.dim());
        }
        let (d, c, h) = (self.input_dim, self.output_dim, self.hidden_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n1 = Normal::new(0.0, (1.0 / d as f64).sqrt()).expect("positive std");
        let n2 = Normal::new(0.0, (1.0 / h as f64).sqrt()).expect("positive std");
        let mut w = Vec::with_capacity(self.dim());
        w.extend((0..h * d).map(|_| n1.sample(&mut rng)));
        w.extend(std::iter::repeat_n(0.0, h));
        w.extend((0..c * h).map(|_| n2.sample(&mut rng)));
        w.extend(std::iter::repeat_n(0.0, c));
        WeightVector::from_raw(w)
    }

    fn check(&self, w: &WeightVector, data: &Dataset) -> Result<()> {
        if w.len() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                found: w.len(),
            });
        }
        if data.dim() != self.input_dim {
            return Err(Error::Dimension {
                expected: self.input_dim,
                found: data.dim(),
            });
        }
        match (self.is_classifier(), data.n_classes()) {
            (false, None) => Ok(()),
            (true, Some(c)) if c <= self.output_dim => Ok(()),
            _ => Err(Error::Task("dataset kind does not match task".into())),
        }
    }
}

/// Mean per-sample loss: squared error or cross-entropy.
pub fn loss(task: &TaskSpec, w: &WeightVector, data: &Dataset) -> Result<f64> {
    task.check(w, data)?;
    if data.is_empty() {
        return Err(Error::NoData);
    }
    let sum: f64 = data.samples().iter().map(|s| sample_loss(task, w.as_slice(), s)).sum();
    Ok(sum / data.len() as f64)
}

/// Gradient of the batch-mean loss.
pub fn gradient(task: &TaskSpec, w: &WeightVector, batch: &Dataset) -> Result<WeightVector> {
    task.check(w, batch)?;
    if batch.is_empty() {
        return Err(Error::NoData);
    }
    WeightVector::new(gradient_on(task, w.as_slice(), batch.samples().iter()))
}

/// Fraction of argmax-correct predictions; `None` for regression.
pub fn accuracy(task: &TaskSpec, w: &WeightVector, data: &Dataset) -> Result<Option<f64>> {
    task.check(w, data)?;
    if !task.is_classifier() {
        return Ok(None);
    }
    if data.is_empty() {
        return Err(Error::NoData);
    }
    let correct = data
        .samples()
        .iter()
        .filter(|s| {
            let logits = logits(task, w.as_slice(), &s.features);
            let pred = logits
                .iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |best, (i, &z)| if z > best.1 { (i, z) } else { best },
                )
                .0;
            matches!(s.target, Target::Class(c) if c == pred)
        })
        .count();
    Ok(Some(correct as f64 / data.len() as f64))
}

fn class_of(s: &Sample) -> usize {
    match s.target {
        Target::Class(c) => c,
        Target::Value(_) => unreachable!("checked by TaskSpec::check"),
    }
}

fn value_of(s: &Sample) -> f64 {
    match s.target {
        Target::Value(v) => v,
        Target::Class(_) => unreachable!("checked by TaskSpec::check"),
    }
}

fn linear_pred(w: &[f64], x: &[f64]) -> f64 {
    let d = x.len();
    w[..d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + w[d]
}

fn affine(w: &[f64], b: &[f64], x: &[f64], rows: usize) -> Vec<f64> {
    let cols = x.len();
    (0..rows)
        .map(|r| {
            w[r * cols..(r + 1) * cols]
                .iter()
                .zip(x)
                .map(|(a, v)| a * v)
                .sum::<f64>()
                + b[r]
        })
        .collect()
}

struct MlpView<'a> {
    w1: &'a [f64],
    b1: &'a [f64],
    w2: &'a [f64],
    b2: &'a [f64],
}

fn mlp_view<'a>(task: &TaskSpec, w: &'a [f64]) -> MlpView<'a> {
    let (d, c, h) = (task.input_dim, task.output_dim, task.hidden_dim);
    let (w1, rest) = w.split_at(h * d);
    let (b1, rest) = rest.split_at(h);
    let (w2, b2) = rest.split_at(c * h);
    MlpView { w1, b1, w2, b2 }
}

fn logits(task: &TaskSpec, w: &[f64], x: &[f64]) -> Vec<f64> {
    let c = task.output_dim;
    match task.kind {
        TaskKind::LinearRegression => vec![linear_pred(w, x)],
        TaskKind::SoftmaxClassifier => {
            let (wm, b) = w.split_at(c * task.input_dim);
            affine(wm, b, x, c)
        }
        TaskKind::OneHiddenMlp => {
            let v = mlp_view(task, w);
            let hidden: Vec<f64> = affine(v.w1, v.b1, x, task.hidden_dim)
                .into_iter()
                .map(f64::tanh)
                .collect();
            affine(v.w2, v.b2, &hidden, c)
        }
    }
}

fn log_softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

fn sample_loss(task: &TaskSpec, w: &[f64], s: &Sample) -> f64 {
    match task.kind {
        TaskKind::LinearRegression => {
            let r = linear_pred(w, &s.features) - value_of(s);
            r * r
        }
        _ => -log_softmax(&logits(task, w, &s.features))[class_of(s)],
    }
}

pub(crate) fn gradient_on<'a>(task: &TaskSpec, w: &[f64], batch: impl Iterator<Item = &'a Sample>) -> Vec<f64> {
    let mut g = vec![0.0; w.len()];
    let mut n = 0usize;
    let (d, c, h) = (task.input_dim, task.output_dim, task.hidden_dim);
    for s in batch {
        n += 1;
        let x = &s.features;
        match task.kind {
            TaskKind::LinearRegression => {
                let r2 = 2.0 * (linear_pred(w, x) - value_of(s));
                for (gi, xi) in g[..d].iter_mut().zip(x) {
                    *gi += r2 * xi;
                }
                g[d] += r2;
            }
            TaskKind::SoftmaxClassifier => {
                let dz = softmax_residual(&logits(task, w, x), class_of(s));
                let (gw, gb) = g.split_at_mut(c * d);
                for r in 0..c {
                    for (gi, xi) in gw[r * d..(r + 1) * d].iter_mut().zip(x) {
                        *gi += dz[r] * xi;
                    }
                    gb[r] += dz[r];
                }
            }
            TaskKind::OneHiddenMlp => {
                let v = mlp_view(task, w);
                let hidden: Vec<f64> = affine(v.w1, v.b1, x, h).into_iter().map(f64::tanh).collect();
                let dz = softmax_residual(&affine(v.w2, v.b2, &hidden, c), class_of(s));
                let (gw1, rest) = g.split_at_mut(h * d);
                let (gb1, rest) = rest.split_at_mut(h);
                let (gw2, gb2) = rest.split_at_mut(c * h);
                let mut dh = vec![0.0; h];
                for r in 0..c {
                    for q in 0..h {
                        gw2[r * h + q] += dz[r] * hidden[q];
                        dh[q] += v.w2[r * h + q] * dz[r];
                    }
                    gb2[r] += dz[r];
                }
                for q in 0..h {
                    let da = dh[q] * (1.0 - hidden[q] * hidden[q]);
                    for (gi, xi) in gw1[q * d..(q + 1) * d].iter_mut().zip(x) {
                        *gi += da * xi;
                    }
                    gb1[q] += da;
                }
            }
        }
    }
    let inv = 1.0 / n.max(1) as f64;
    g.iter_mut().for_each(|v| *v *= inv);
    g
}

fn softmax_residual(z: &[f64], class: usize) -> Vec<f64> {
    let mut p: Vec<f64> = log_softmax(z).into_iter().map(f64::exp).collect();
    p[class] -= 1.0;
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::data::{SyntheticClassification, SyntheticRegression};

    fn sample(x: &[f64], t: Target) -> Sample {
        Sample {
            features: x.to_vec(),
            target: t,
            group: 0,
        }
    }

    #[test]
    fn dims_follow_layout() {
        assert_eq!(TaskSpec::linear_regression(4).dim(), 5);
        assert_eq!(TaskSpec::softmax(4, 3).dim(), 15);
        assert_eq!(TaskSpec::mlp(4, 6, 3).dim(), 24 + 6 + 18 + 3);
        assert!(TaskSpec::mlp(4, 0, 3).validate().is_err());
        assert!(TaskSpec::softmax(4, 1).validate().is_err());
    }

    #[test]
    fn zero_softmax_loss_is_ln_classes() {
        let data = SyntheticClassification {
            n_samples: 50,
            n_classes: 10,
            dim: 3,
            separation: 1.0,
            noise: 1.0,
        }
        .generate(1)
        .unwrap();
        let task = TaskSpec::softmax(3, 10);
        let l = loss(&task, &WeightVector::zeros(task.dim()), &data).unwrap();
        assert!((l - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn exact_linear_fit_has_zero_loss_and_gradient() {
        // y = 2 x0 - x1 + 0.5
        let xs = [[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [2.0, -1.0]];
        let samples = xs
            .iter()
            .map(|x| sample(x, Target::Value(2.0 * x[0] - x[1] + 0.5)))
            .collect();
        let data = Dataset::new(samples, 2, None, 1).unwrap();
        let task = TaskSpec::linear_regression(2);
        let w = WeightVector::new(vec![2.0, -1.0, 0.5]).unwrap();
        assert!(loss(&task, &w, &data).unwrap() < 1e-24);
        assert!(gradient(&task, &w, &data)
            .unwrap()
            .as_slice()
            .iter()
            .all(|g| g.abs() < 1e-10));
    }

    #[test]
    fn single_sample_linear_gradient_closed_form() {
        let x = [0.3, -1.2, 2.0];
        let y = 0.7;
        let data = Dataset::new(vec![sample(&x, Target::Value(y))], 3, None, 1).unwrap();
        let task = TaskSpec::linear_regression(3);
        let w = [0.5, 0.25, -0.1, 0.2];
        let pred = w[0] * x[0] + w[1] * x[1] + w[2] * x[2] + w[3];
        let r = 2.0 * (pred - y);
        let expected = [r * x[0], r * x[1], r * x[2], r];
        let g = gradient(&task, &WeightVector::new(w.to_vec()).unwrap(), &data).unwrap();
        for (a, b) in g.as_slice().iter().zip(expected) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    /// Straightforward forward pass written out term by term.
    fn mlp_loss_reference(task: &TaskSpec, w: &[f64], data: &Dataset) -> f64 {
        let (d, c, h) = (task.input_dim, task.output_dim, task.hidden_dim);
        let mut total = 0.0;
        for s in data.samples() {
            let mut hidden = vec![0.0; h];
            for q in 0..h {
                let mut a = w[h * d + q];
                for p in 0..d {
                    a += w[q * d + p] * s.features[p];
                }
                hidden[q] = a.tanh();
            }
            let off = h * d + h;
            let mut z = vec![0.0; c];
            for r in 0..c {
                z[r] = w[off + c * h + r];
                for q in 0..h {
                    z[r] += w[off + r * h + q] * hidden[q];
                }
            }
            let denom: f64 = z.iter().map(|v| v.exp()).sum();
            let Target::Class(y) = s.target else { unreachable!() };
            total += -(z[y].exp() / denom).ln();
        }
        total / data.len() as f64
    }

    #[test]
    fn mlp_loss_matches_reference_forward_pass() {
        let data = SyntheticClassification {
            n_samples: 20,
            n_classes: 3,
            dim: 4,
            separation: 1.5,
            noise: 0.7,
        }
        .generate(6)
        .unwrap();
        let task = TaskSpec::mlp(4, 5, 3);
        let w = task.init_weights(13);
        let got = loss(&task, &w, &data).unwrap();
        let want = mlp_loss_reference(&task, w.as_slice(), &data);
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let data = SyntheticRegression {
            n_samples: 5,
            dim: 2,
            n_groups: 1,
            group_shift: 0.0,
            concept_shift: 0.0,
            noise: 0.1,
        }
        .generate(1)
        .unwrap();
        let task = TaskSpec::linear_regression(2);
        assert!(matches!(
            loss(&task, &WeightVector::zeros(2), &data),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn accuracy_is_none_for_regression() {
        let data = SyntheticRegression {
            n_samples: 5,
            dim: 2,
            n_groups: 1,
            group_shift: 0.0,
            concept_shift: 0.0,
            noise: 0.1,
        }
        .generate(1)
        .unwrap();
        let task = TaskSpec::linear_regression(2);
        assert_eq!(accuracy(&task, &WeightVector::zeros(3), &data).unwrap(), None);
    }
}
