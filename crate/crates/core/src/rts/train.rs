//! Mini-batch SGD training and evaluation for [`RtsModel`].

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{bce_with_logit, sigmoid, Activations, RtsModel, DEFAULT_HIDDEN};
use crate::binio;
use crate::{Error, Result};

pub const SAMPLES_MAGIC: &[u8; 4] = b"RVSM";

/// One (previous patch, current patch) feature pair. `label == true` means the
/// current patch is redundant.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub prev: Vec<f32>,
    pub cur: Vec<f32>,
    pub label: bool,
}

impl TrainingSample {
    pub fn new(prev: Vec<f32>, cur: Vec<f32>, label: bool) -> Self {
        Self { prev, cur, label }
    }

    fn input(&self) -> impl Iterator<Item = f64> + '_ {
        self.prev.iter().chain(&self.cur).map(|&v| v as f64)
    }
}

/// How the first layer sees the feature pair during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pairing {
    /// Independent weights over `concat(prev, cur)`.
    #[default]
    Concat,
    /// First-layer weights tied as `[-D, D]`, i.e. the layer sees `cur - prev`.
    /// The exported model keeps the concatenated input layout.
    Difference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub l2: f64,
    pub hidden: (usize, usize),
    pub pairing: Pairing,
    /// Train on standardized inputs and fold the affine map into the first layer.
    pub standardize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            epochs: 20,
            batch_size: 32,
            seed: 0,
            l2: 1e-4,
            hidden: DEFAULT_HIDDEN,
            pairing: Pairing::Concat,
            standardize: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("learning_rate must be finite and >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(Error::InvalidConfig("l2 must be finite and >= 0".into()));
        }
        if self.hidden.0 == 0 || self.hidden.1 == 0 {
            return Err(Error::InvalidConfig("hidden widths must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: RtsModel,
    /// The freshly initialized model, expressed on raw inputs like `model`.
    pub initial: RtsModel,
    /// Full-dataset objective (mean BCE plus L2) after each epoch.
    pub epoch_losses: Vec<f64>,
}

fn check_dims(samples: &[TrainingSample]) -> Result<usize> {
    let first = samples.first().ok_or(Error::EmptyDataset)?;
    let d = first.prev.len();
    if d == 0 {
        return Err(Error::DimMismatch("feature dim is 0".into()));
    }
    for (i, s) in samples.iter().enumerate() {
        if s.prev.len() != d || s.cur.len() != d {
            return Err(Error::DimMismatch(format!(
                "sample {i} has dims ({}, {}), expected {d}",
                s.prev.len(),
                s.cur.len()
            )));
        }
    }
    Ok(d)
}

/// Mean BCE plus `l2 / 2 · Σ w²` over weights (biases excluded).
pub fn objective(model: &RtsModel, samples: &[TrainingSample], l2: f64) -> Result<f64> {
    let inputs = inputs_of(model, samples)?;
    Ok(objective_raw(model, &inputs, samples, l2))
}

/// The objective and its analytic gradient with respect to [`RtsModel::params`].
pub fn objective_and_gradient(
    model: &RtsModel,
    samples: &[TrainingSample],
    l2: f64,
) -> Result<(f64, Vec<f64>)> {
    let inputs = inputs_of(model, samples)?;
    let idx: Vec<usize> = (0..samples.len()).collect();
    let mut grad = vec![0.0; model.params().len()];
    let loss = accumulate_gradient(model, &inputs, samples, &idx, l2, &mut grad);
    Ok((loss, grad))
}

fn inputs_of(model: &RtsModel, samples: &[TrainingSample]) -> Result<Vec<f64>> {
    let d = check_dims(samples)?;
    if 2 * d != model.input_dim() {
        return Err(Error::ModelDimMismatch {
            expected: model.input_dim(),
            actual: 2 * d,
        });
    }
    Ok(samples.iter().flat_map(|s| s.input()).collect())
}

fn l2_penalty(model: &RtsModel, l2: f64) -> f64 {
    if l2 == 0.0 {
        return 0.0;
    }
    let layout = model.layout();
    let sq: f64 = model
        .params()
        .iter()
        .enumerate()
        .filter(|(i, _)| layout.is_weight(*i))
        .map(|(_, w)| w * w)
        .sum();
    0.5 * l2 * sq
}

fn objective_raw(model: &RtsModel, inputs: &[f64], samples: &[TrainingSample], l2: f64) -> f64 {
    let d = model.input_dim();
    let mut act = Activations::new(model);
    let total: f64 = samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let z = model.logit_with(&inputs[i * d..(i + 1) * d], &mut act);
            bce_with_logit(z, if s.label { 1.0 } else { 0.0 })
        })
        .sum();
    total / samples.len() as f64 + l2_penalty(model, l2)
}

/// Overwrites `grad` with the gradient of the batch objective; returns its value.
fn accumulate_gradient(
    model: &RtsModel,
    inputs: &[f64],
    samples: &[TrainingSample],
    batch: &[usize],
    l2: f64,
    grad: &mut [f64],
) -> f64 {
    grad.fill(0.0);
    let d = model.input_dim();
    let scale = 1.0 / batch.len() as f64;
    let mut act = Activations::new(model);
    let mut loss = 0.0;
    for &i in batch {
        let x = &inputs[i * d..(i + 1) * d];
        let y = if samples[i].label { 1.0 } else { 0.0 };
        let z = model.logit_with(x, &mut act);
        loss += bce_with_logit(z, y);
        model.backward(x, &act, (sigmoid(z) - y) * scale, grad);
    }
    if l2 > 0.0 {
        let layout = model.layout();
        for (i, (g, w)) in grad.iter_mut().zip(model.params()).enumerate() {
            if layout.is_weight(i) {
                *g += l2 * w;
            }
        }
    }
    loss * scale + l2_penalty(model, l2)
}

/// Pooled per-feature mean and standard deviation over both halves of the pair,
/// so that `prev` and `cur` column `i` share one affine map.
fn pooled_stats(samples: &[TrainingSample], d: usize) -> (Vec<f64>, Vec<f64>) {
    let n = (2 * samples.len()) as f64;
    let mut mean = vec![0.0; d];
    for s in samples {
        for i in 0..d {
            mean[i] += s.prev[i] as f64 + s.cur[i] as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for s in samples {
        for i in 0..d {
            var[i] += (s.prev[i] as f64 - mean[i]).powi(2) + (s.cur[i] as f64 - mean[i]).powi(2);
        }
    }
    let std = var.iter().map(|v| (v / n).sqrt()).map(|s| if s > 1e-12 { s } else { 1.0 }).collect();
    (mean, std)
}

/// Rewrites a model trained on `(x - mean) / std` into one that takes raw `x`.
fn fold_standardization(model: &mut RtsModel, mean: &[f64], std: &[f64]) {
    let layout = model.layout();
    let d_in = model.input_dim();
    let d = d_in / 2;
    let h1 = model.hidden_dims().0;
    let p = model.params_mut();
    for r in 0..h1 {
        let mut shift = 0.0;
        for c in 0..d_in {
            let w = &mut p[layout.w1 + r * d_in + c];
            *w /= std[c % d];
            shift += *w * mean[c % d];
        }
        p[layout.b1 + r] -= shift;
    }
}

fn tie_first_layer(model: &mut RtsModel) {
    let layout = model.layout();
    let d_in = model.input_dim();
    let d = d_in / 2;
    let h1 = model.hidden_dims().0;
    let p = model.params_mut();
    for r in 0..h1 {
        let row = layout.w1 + r * d_in;
        for i in 0..d {
            p[row + i] = -p[row + d + i];
        }
    }
}

/// Projects the first-layer gradient onto the tied `[-D, D]` parameterization.
fn tie_gradient(model: &RtsModel, grad: &mut [f64]) {
    let layout = model.layout();
    let d_in = model.input_dim();
    let d = d_in / 2;
    for r in 0..model.hidden_dims().0 {
        let row = layout.w1 + r * d_in;
        for i in 0..d {
            let g = grad[row + d + i] - grad[row + i];
            grad[row + d + i] = g;
            grad[row + i] = -g;
        }
    }
}

/// Seeded mini-batch gradient descent on mean BCE with L2.
///
/// Single-threaded; identical samples, config, and seed give bit-identical
/// parameters.
pub fn train(samples: &[TrainingSample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let d = check_dims(samples)?;
    let (h1, h2) = cfg.hidden;
    let mut model = RtsModel::init(2 * d, h1, h2, cfg.seed)?;
    if cfg.pairing == Pairing::Difference {
        tie_first_layer(&mut model);
    }

    let (mean, std) = if cfg.standardize {
        pooled_stats(samples, d)
    } else {
        (vec![0.0; d], vec![1.0; d])
    };
    let inputs: Vec<f64> = samples
        .iter()
        .flat_map(|s| {
            let (mean, std) = (&mean, &std);
            s.input().enumerate().map(move |(c, v)| (v - mean[c % d]) / std[c % d])
        })
        .collect();

    let mut initial = model.clone();
    fold_standardization(&mut initial, &mean, &std);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_0F5A_4D1E_B47C);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut grad = vec![0.0; model.params().len()];
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            accumulate_gradient(&model, &inputs, samples, batch, cfg.l2, &mut grad);
            if cfg.pairing == Pairing::Difference {
                tie_gradient(&model, &mut grad);
            }
            for (p, g) in model.params_mut().iter_mut().zip(&grad) {
                *p -= cfg.learning_rate * g;
            }
        }
        epoch_losses.push(objective_raw(&model, &inputs, samples, cfg.l2));
    }

    if epoch_losses.iter().any(|l| !l.is_finite()) || model.params().iter().any(|p| !p.is_finite()) {
        return Err(Error::InvalidConfig(
            "training diverged to non-finite values; lower the learning rate".into(),
        ));
    }
    fold_standardization(&mut model, &mean, &std);
    Ok(TrainOutcome {
        model,
        initial,
        epoch_losses,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub true_pos: usize,
    pub false_pos: usize,
    pub true_neg: usize,
    pub false_neg: usize,
}

/// Confusion-matrix metrics with "redundant" as the positive class; a sample is
/// predicted redundant iff its probability is `>= threshold`. Precision and
/// recall are 0 when their denominators are empty.
pub fn evaluate(model: &RtsModel, samples: &[TrainingSample], threshold: f64) -> Result<Metrics> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for s in samples {
        let pred = model.forward(&s.prev, &s.cur)? >= threshold;
        match (pred, s.label) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(Metrics {
        accuracy: ratio(tp + tn, samples.len()),
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_),
        true_pos: tp,
        false_pos: fp,
        true_neg: tn,
        false_neg: fn_,
    })
}

/// `RVSM` sample file: magic, u32 count, u32 dim, u32 reserved, then per sample
/// `dim` prev floats, `dim` cur floats, and a u32 label (1 = redundant).
pub fn write_samples<W: Write>(w: &mut W, samples: &[TrainingSample]) -> Result<()> {
    let d = check_dims(samples)?;
    w.write_all(SAMPLES_MAGIC)?;
    for v in [samples.len() as u32, d as u32, 0] {
        w.write_all(&v.to_le_bytes())?;
    }
    for s in samples {
        binio::write_f32s(w, s.prev.iter().chain(&s.cur).copied())?;
        w.write_all(&(s.label as u32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_samples<R: Read>(r: &mut R) -> Result<Vec<TrainingSample>> {
    binio::read_magic(r, SAMPLES_MAGIC)?;
    let n = binio::read_u32(r, "count")? as usize;
    let d = binio::read_u32(r, "dim")? as usize;
    let _reserved = binio::read_u32(r, "reserved")?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut v = binio::read_f32s(r, 2 * d, "sample features")?;
        if let Some(i) = v.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFiniteValue(i));
        }
        let cur = v.split_off(d);
        let label = match binio::read_u32(r, "label")? {
            0 => false,
            1 => true,
            other => return Err(Error::CorruptFile(format!("label {other} is not 0 or 1"))),
        };
        out.push(TrainingSample::new(v, cur, label));
    }
    binio::expect_eof(r)?;
    Ok(out)
}

pub fn save_samples(path: impl AsRef<Path>, samples: &[TrainingSample]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_samples(&mut w, samples)?;
    w.flush()?;
    Ok(())
}

pub fn load_samples(path: impl AsRef<Path>) -> Result<Vec<TrainingSample>> {
    read_samples(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize, seed: u64) -> Vec<TrainingSample> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let prev: Vec<f32> = (0..3).map(|_| rng.gen_range(0.0..255.0)).collect();
                if rng.gen_bool(0.5) {
                    TrainingSample::new(prev.clone(), prev, true)
                } else {
                    let cur = prev.iter().map(|v| 255.0 - v).collect();
                    TrainingSample::new(prev, cur, false)
                }
            })
            .collect()
    }

    #[test]
    fn empty_and_mismatched() {
        assert!(matches!(train(&[], &TrainConfig::default()), Err(Error::EmptyDataset)));
        let bad = vec![
            TrainingSample::new(vec![1.0], vec![1.0], true),
            TrainingSample::new(vec![1.0, 2.0], vec![1.0, 2.0], true),
        ];
        assert!(matches!(train(&bad, &TrainConfig::default()), Err(Error::DimMismatch(_))));
        let m = RtsModel::zeros(2, 2, 2).unwrap();
        assert!(matches!(evaluate(&m, &[], 0.5), Err(Error::EmptyDataset)));
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let samples = toy(64, 1);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 5,
            ..TrainConfig::default()
        };
        let out = train(&samples, &cfg).unwrap();
        assert_eq!(out.model, out.initial);
        assert!(out.epoch_losses.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn repeated_single_sample_loss_is_nonincreasing() {
        let s = TrainingSample::new(vec![10.0, 20.0], vec![30.0, 5.0], true);
        let samples = vec![s; 16];
        let cfg = TrainConfig {
            learning_rate: 0.01,
            epochs: 30,
            batch_size: 4,
            hidden: (8, 4),
            ..TrainConfig::default()
        };
        let out = train(&samples, &cfg).unwrap();
        for w in out.epoch_losses.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "{:?}", out.epoch_losses);
        }
    }

    #[test]
    fn learns_separable_toy_and_is_deterministic() {
        let samples = toy(400, 2);
        let cfg = TrainConfig {
            epochs: 40,
            seed: 9,
            l2: 0.0,
            hidden: (16, 8),
            ..TrainConfig::default()
        };
        let a = train(&samples, &cfg).unwrap();
        let b = train(&samples, &cfg).unwrap();
        assert_eq!(a.model, b.model);
        let m = evaluate(&a.model, &samples, 0.5).unwrap();
        assert!(m.accuracy >= 0.98, "{m:?}");
        // The folded model on raw inputs reproduces the standardized objective.
        let last = *a.epoch_losses.last().unwrap();
        assert!((objective(&a.model, &samples, 0.0).unwrap() - last).abs() < 1e-3);
    }

    #[test]
    fn difference_pairing_keeps_tied_weights() {
        let samples = toy(200, 3);
        let cfg = TrainConfig {
            pairing: Pairing::Difference,
            epochs: 10,
            hidden: (8, 4),
            ..TrainConfig::default()
        };
        let out = train(&samples, &cfg).unwrap();
        let m = &out.model;
        let d_in = m.input_dim();
        for r in 0..m.hidden_dims().0 {
            for i in 0..d_in / 2 {
                let a = m.params()[r * d_in + i];
                let b = m.params()[r * d_in + d_in / 2 + i];
                assert!((a + b).abs() <= 1e-12 * a.abs().max(1.0));
            }
        }
        // Identical halves cancel, so prev == cur always yields the same probability.
        let p1 = m.forward(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        let p2 = m.forward(&[200.0, 9.0, 40.0], &[200.0, 9.0, 40.0]).unwrap();
        assert!((p1 - p2).abs() < 1e-9);
    }

    #[test]
    fn degenerate_predictor_accuracy_is_positive_rate() {
        let m = RtsModel::zeros(2, 2, 2).unwrap();
        let samples: Vec<_> = (0..10)
            .map(|i| TrainingSample::new(vec![i as f32], vec![0.0], i % 2 == 0))
            .collect();
        let met = evaluate(&m, &samples, 0.5).unwrap();
        assert_eq!(met.accuracy, 0.5);
        assert_eq!(met.recall, 1.0);
        assert_eq!(met.precision, 0.5);
    }

    #[test]
    fn samples_file_roundtrip() {
        let samples = toy(5, 4);
        let mut buf = Vec::new();
        write_samples(&mut buf, &samples).unwrap();
        assert_eq!(read_samples(&mut buf.as_slice()).unwrap(), samples);
        let n = buf.len();
        buf[n - 4] = 7;
        assert!(matches!(read_samples(&mut buf.as_slice()), Err(Error::CorruptFile(_))));
    }
}
