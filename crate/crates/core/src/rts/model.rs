//! The redundancy classifier: `concat(prev, cur) → h1 → h2 → 1` with ReLU between
//! layers and a sigmoid on the output logit.
//!
//! Parameters live in one flat `f64` buffer in file order:
//! `W1 (h1 × in), b1, W2 (h2 × h1), b2, W3 (1 × h2), b3`, weight matrices row-major.
//! The on-disk `RVML` format stores the same sequence as `f32`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::binio;
use crate::features::FeatureMap;
use crate::{Error, Result};

pub const MODEL_MAGIC: &[u8; 4] = b"RVML";
pub const DEFAULT_HIDDEN: (usize, usize) = (64, 32);

#[derive(Debug, Clone, PartialEq)]
pub struct RtsModel {
    input_dim: usize,
    h1: usize,
    h2: usize,
    params: Vec<f64>,
}

/// Offsets of each parameter block inside the flat buffer.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Layout {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
    pub w3: usize,
    pub b3: usize,
    pub len: usize,
}

impl Layout {
    fn new(input_dim: usize, h1: usize, h2: usize) -> Self {
        let w1 = 0;
        let b1 = w1 + h1 * input_dim;
        let w2 = b1 + h1;
        let b2 = w2 + h2 * h1;
        let w3 = b2 + h2;
        let b3 = w3 + h2;
        Layout {
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
            len: b3 + 1,
        }
    }

    /// True for parameters that are weights (subject to L2), false for biases.
    pub fn is_weight(&self, i: usize) -> bool {
        i < self.b1 || (self.w2..self.b2).contains(&i) || (self.w3..self.b3).contains(&i)
    }
}

/// Per-sample activations kept for backprop.
#[derive(Debug, Clone)]
pub(crate) struct Activations {
    a1: Vec<f64>,
    a2: Vec<f64>,
}

impl Activations {
    pub fn new(model: &RtsModel) -> Self {
        Activations {
            a1: vec![0.0; model.h1],
            a2: vec![0.0; model.h2],
        }
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    let p = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    // Keep the probability strictly inside (0, 1) even where the logistic saturates.
    p.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// Binary cross-entropy of a logit, computed without forming the probability.
#[inline]
pub(crate) fn bce_with_logit(z: f64, label: f64) -> f64 {
    z.max(0.0) - z * label + (-z.abs()).exp().ln_1p()
}

impl RtsModel {
    /// All-zero parameters; predicts 0.5 everywhere.
    pub fn zeros(input_dim: usize, h1: usize, h2: usize) -> Result<Self> {
        Self::check_dims(input_dim, h1, h2)?;
        let len = Layout::new(input_dim, h1, h2).len;
        Ok(Self {
            input_dim,
            h1,
            h2,
            params: vec![0.0; len],
        })
    }

    /// He-uniform weights, zero biases.
    pub fn init(input_dim: usize, h1: usize, h2: usize, seed: u64) -> Result<Self> {
        let mut m = Self::zeros(input_dim, h1, h2)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = m.layout();
        let blocks = [(l.w1, l.b1, input_dim), (l.w2, l.b2, h1), (l.w3, l.b3, h2)];
        for (start, end, fan_in) in blocks {
            let bound = (6.0 / fan_in as f64).sqrt();
            for p in &mut m.params[start..end] {
                *p = rng.gen_range(-bound..bound);
            }
        }
        Ok(m)
    }

    pub fn from_params(input_dim: usize, h1: usize, h2: usize, params: Vec<f64>) -> Result<Self> {
        Self::check_dims(input_dim, h1, h2)?;
        let len = Layout::new(input_dim, h1, h2).len;
        if params.len() != len {
            return Err(Error::DimMismatch(format!("{} parameters, expected {len}", params.len())));
        }
        if let Some(i) = params.iter().position(|p| !p.is_finite()) {
            return Err(Error::NonFiniteValue(i));
        }
        Ok(Self {
            input_dim,
            h1,
            h2,
            params,
        })
    }

    fn check_dims(input_dim: usize, h1: usize, h2: usize) -> Result<()> {
        if input_dim == 0 || !input_dim.is_multiple_of(2) || h1 == 0 || h2 == 0 {
            return Err(Error::DimMismatch(format!(
                "invalid layer sizes {input_dim} -> {h1} -> {h2} -> 1"
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    /// Dimension of one patch feature (half the input).
    pub fn feature_dim(&self) -> usize {
        self.input_dim / 2
    }

    pub fn hidden_dims(&self) -> (usize, usize) {
        (self.h1, self.h2)
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub(crate) fn layout(&self) -> Layout {
        Layout::new(self.input_dim, self.h1, self.h2)
    }

    /// Output logit for a concatenated input, recording pre-activations.
    pub(crate) fn logit_with(&self, x: &[f64], act: &mut Activations) -> f64 {
        let l = self.layout();
        let p = &self.params;
        let (d, h1, h2) = (self.input_dim, self.h1, self.h2);
        for (r, a) in act.a1.iter_mut().enumerate() {
            let row = &p[l.w1 + r * d..l.w1 + (r + 1) * d];
            *a = p[l.b1 + r] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
        for (r, a) in act.a2.iter_mut().enumerate() {
            let row = &p[l.w2 + r * h1..l.w2 + (r + 1) * h1];
            *a = p[l.b2 + r] + row.iter().zip(&act.a1).map(|(w, v)| w * v.max(0.0)).sum::<f64>();
        }
        p[l.b3]
            + p[l.w3..l.w3 + h2]
                .iter()
                .zip(&act.a2)
                .map(|(w, v)| w * v.max(0.0))
                .sum::<f64>()
    }

    /// Accumulates `scale * dL/dθ` for one sample into `grad`, given `dL/dz`.
    pub(crate) fn backward(&self, x: &[f64], act: &Activations, dz: f64, grad: &mut [f64]) {
        let l = self.layout();
        let p = &self.params;
        let (d, h1, h2) = (self.input_dim, self.h1, self.h2);
        grad[l.b3] += dz;
        let mut da2 = vec![0.0; h2];
        for j in 0..h2 {
            let h = act.a2[j].max(0.0);
            grad[l.w3 + j] += dz * h;
            if act.a2[j] > 0.0 {
                da2[j] = dz * p[l.w3 + j];
            }
        }
        let mut dh1 = vec![0.0; h1];
        for (r, &g) in da2.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad[l.b2 + r] += g;
            let off = l.w2 + r * h1;
            for i in 0..h1 {
                grad[off + i] += g * act.a1[i].max(0.0);
                dh1[i] += g * p[off + i];
            }
        }
        for r in 0..h1 {
            if act.a1[r] <= 0.0 || dh1[r] == 0.0 {
                continue;
            }
            let g = dh1[r];
            grad[l.b1 + r] += g;
            let off = l.w1 + r * d;
            for (gw, v) in grad[off..off + d].iter_mut().zip(x) {
                *gw += g * v;
            }
        }
    }

    fn concat(&self, prev: &[f32], cur: &[f32], buf: &mut Vec<f64>) -> Result<()> {
        let d = self.feature_dim();
        if prev.len() != cur.len() {
            return Err(Error::DimMismatch(format!("prev dim {} vs cur dim {}", prev.len(), cur.len())));
        }
        if prev.len() != d {
            return Err(Error::ModelDimMismatch {
                expected: self.input_dim,
                actual: prev.len() * 2,
            });
        }
        buf.clear();
        buf.extend(prev.iter().chain(cur).map(|&v| v as f64));
        Ok(())
    }

    /// Probability that the current patch is redundant given the previous one.
    pub fn forward(&self, prev: &[f32], cur: &[f32]) -> Result<f64> {
        let mut x = Vec::with_capacity(self.input_dim);
        self.concat(prev, cur, &mut x)?;
        let mut act = Activations::new(self);
        Ok(sigmoid(self.logit_with(&x, &mut act)))
    }

    /// Redundancy probability for every patch of a consecutive feature-map pair.
    pub fn predict_maps(&self, prev: &FeatureMap, cur: &FeatureMap) -> Result<Vec<f64>> {
        if prev.n_patches() != cur.n_patches() || prev.dim() != cur.dim() {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} vs {}x{}",
                prev.n_patches(),
                prev.dim(),
                cur.n_patches(),
                cur.dim()
            )));
        }
        if prev.dim() * 2 != self.input_dim {
            return Err(Error::ModelDimMismatch {
                expected: self.input_dim,
                actual: prev.dim() * 2,
            });
        }
        let mut x = Vec::with_capacity(self.input_dim);
        let mut act = Activations::new(self);
        let mut out = Vec::with_capacity(prev.n_patches());
        for (a, b) in prev.iter().zip(cur.iter()) {
            self.concat(a, b, &mut x)?;
            out.push(sigmoid(self.logit_with(&x, &mut act)));
        }
        Ok(out)
    }

    /// Writes the `RVML` format. Parameters are narrowed to `f32`.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MODEL_MAGIC)?;
        for v in [self.input_dim, self.h1, self.h2] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        binio::write_f32s(w, self.params.iter().map(|&p| p as f32))
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        binio::read_magic(r, MODEL_MAGIC)?;
        let input_dim = binio::read_u32(r, "input_dim")? as usize;
        let h1 = binio::read_u32(r, "h1")? as usize;
        let h2 = binio::read_u32(r, "h2")? as usize;
        Self::check_dims(input_dim, h1, h2).map_err(|e| Error::CorruptFile(e.to_string()))?;
        let len = Layout::new(input_dim, h1, h2).len;
        let params = binio::read_f32s(r, len, "model parameters")?;
        binio::expect_eof(r)?;
        Self::from_params(input_dim, h1, h2, params.into_iter().map(f64::from).collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }

    /// The parameters as they would round-trip through the model file.
    pub fn quantized(&self) -> Self {
        Self {
            params: self.params.iter().map(|&p| p as f32 as f64).collect(),
            ..self.clone()
        }
    }
}
