//! Per-patch feature vectors.
//!
//! Built-in extractors are deterministic functions of the patch pixels. Encoder
//! embeddings can be plugged in through the `RVFT` blob format instead.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio;
use crate::raster::PatchGrid;
use crate::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"RVFT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureSource {
    Builtin,
    External,
}

/// Which features to compute for each patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum FeatureSpec {
    /// Per channel `{mean, std, min, max}` followed by per channel quadrant means
    /// `{top-left, top-right, bottom-left, bottom-right}`: `8 × channels` floats.
    #[default]
    PixelStats,
    /// The lowest `k × k` orthonormal DCT-II coefficients of the channel-averaged
    /// patch, row-major by (vertical, horizontal) frequency.
    DctLowFreq { k: usize },
    /// Vectors supplied from an `RVFT` file.
    External { dim: usize },
}

impl FeatureSpec {
    pub fn dim(&self, channels: u32) -> usize {
        match *self {
            FeatureSpec::PixelStats => 8 * channels as usize,
            FeatureSpec::DctLowFreq { k } => k * k,
            FeatureSpec::External { dim } => dim,
        }
    }
}

/// `n_patches × dim` finite `f32` vectors, patch-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    n_patches: usize,
    dim: usize,
    vectors: Vec<f32>,
    source: FeatureSource,
}

impl FeatureMap {
    pub fn new(n_patches: usize, dim: usize, vectors: Vec<f32>, source: FeatureSource) -> Result<Self> {
        if vectors.len() != n_patches * dim {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {n_patches}x{dim}",
                vectors.len()
            )));
        }
        if let Some(i) = vectors.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue(i));
        }
        Ok(Self {
            n_patches,
            dim,
            vectors,
            source,
        })
    }

    pub fn n_patches(&self) -> usize {
        self.n_patches
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn source(&self) -> FeatureSource {
        self.source
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.vectors
    }

    #[inline]
    pub fn vector(&self, index: usize) -> &[f32] {
        &self.vectors[index * self.dim..(index + 1) * self.dim]
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = &[f32]> {
        // chunks_exact panics on a zero chunk size; a zero-dim map has no data.
        self.vectors.chunks_exact(self.dim.max(1))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(FEATURE_MAGIC)?;
        w.write_all(&(self.n_patches as u32).to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&0u32.to_le_bytes())?;
        binio::write_f32s(w, self.vectors.iter().copied())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    /// Parses an `RVFT` blob and checks it against the expected patch count.
    pub fn read_external<R: Read>(r: &mut R, expected_patches: usize) -> Result<Self> {
        binio::read_magic(r, FEATURE_MAGIC)?;
        let n = binio::read_u32(r, "n_patches")? as usize;
        let dim = binio::read_u32(r, "dim")? as usize;
        let _reserved = binio::read_u32(r, "reserved")?;
        if dim == 0 {
            return Err(Error::CorruptFile("feature dim is 0".into()));
        }
        if n != expected_patches {
            return Err(Error::PatchCountMismatch {
                expected: expected_patches,
                actual: n,
            });
        }
        let vectors = binio::read_f32s(r, n * dim, "feature payload")?;
        binio::expect_eof(r)?;
        Self::new(n, dim, vectors, FeatureSource::External)
    }
}

/// Loads externally computed embeddings.
pub fn load_external(path: impl AsRef<Path>, expected_patches: usize) -> Result<FeatureMap> {
    let mut r = BufReader::new(File::open(path)?);
    FeatureMap::read_external(&mut r, expected_patches)
}

pub fn extract(grid: &PatchGrid, spec: &FeatureSpec) -> Result<FeatureMap> {
    let ps = grid.patch_size() as usize;
    let ch = grid.channels() as usize;
    let dim = spec.dim(grid.channels());
    let mut out = Vec::with_capacity(grid.len() * dim);
    match *spec {
        FeatureSpec::External { .. } => return Err(Error::UnsupportedKind),
        FeatureSpec::PixelStats => {
            for patch in grid.patches() {
                pixel_stats(patch, ps, ch, &mut out);
            }
        }
        FeatureSpec::DctLowFreq { k } => {
            if k == 0 || k > ps {
                return Err(Error::InvalidConfig(format!(
                    "dct k must be in 1..={ps}, got {k}"
                )));
            }
            let basis = dct_basis(ps, k);
            let mut gray = vec![0f64; ps * ps];
            let mut tmp = vec![0f64; k * ps];
            for patch in grid.patches() {
                for (g, px) in gray.iter_mut().zip(patch.chunks_exact(ch)) {
                    *g = px.iter().map(|&v| v as f64).sum::<f64>() / ch as f64;
                }
                dct_lowfreq(&gray, ps, k, &basis, &mut tmp, &mut out);
            }
        }
    }
    FeatureMap::new(grid.len(), dim, out, FeatureSource::Builtin)
}

fn pixel_stats(patch: &[u8], ps: usize, ch: usize, out: &mut Vec<f32>) {
    let n = (ps * ps) as f64;
    // Quadrant row/column spans; for odd sizes the middle line belongs to both halves.
    let lo = 0..ps.div_ceil(2);
    let hi = ps / 2..ps;
    let quads = [
        (lo.clone(), lo.clone()),
        (lo.clone(), hi.clone()),
        (hi.clone(), lo.clone()),
        (hi.clone(), hi.clone()),
    ];
    for c in 0..ch {
        let mut sum = 0f64;
        let mut sq = 0f64;
        let mut min = u8::MAX;
        let mut max = u8::MIN;
        for &v in patch.iter().skip(c).step_by(ch) {
            let f = v as f64;
            sum += f;
            sq += f * f;
            min = min.min(v);
            max = max.max(v);
        }
        let mean = sum / n;
        let var = (sq / n - mean * mean).max(0.0);
        out.extend_from_slice(&[mean as f32, var.sqrt() as f32, min as f32, max as f32]);
    }
    for c in 0..ch {
        for (rows, cols) in &quads {
            let mut sum = 0f64;
            for y in rows.clone() {
                for x in cols.clone() {
                    sum += patch[(y * ps + x) * ch + c] as f64;
                }
            }
            out.push((sum / (rows.len() * cols.len()) as f64) as f32);
        }
    }
}

/// `basis[u * n + x]` = orthonormal DCT-II weight of frequency `u` at sample `x`.
fn dct_basis(n: usize, k: usize) -> Vec<f64> {
    let mut basis = vec![0f64; k * n];
    for u in 0..k {
        let scale = if u == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
        for x in 0..n {
            basis[u * n + x] = scale * (PI * (2 * x + 1) as f64 * u as f64 / (2 * n) as f64).cos();
        }
    }
    basis
}

/// Separable transform: columns first into `tmp[u][x]`, then rows.
fn dct_lowfreq(gray: &[f64], n: usize, k: usize, basis: &[f64], tmp: &mut [f64], out: &mut Vec<f32>) {
    for u in 0..k {
        let bu = &basis[u * n..(u + 1) * n];
        for x in 0..n {
            tmp[u * n + x] = (0..n).map(|y| bu[y] * gray[y * n + x]).sum();
        }
    }
    for u in 0..k {
        for v in 0..k {
            let bv = &basis[v * n..(v + 1) * n];
            let c: f64 = (0..n).map(|x| bv[x] * tmp[u * n + x]).sum();
            out.push(c as f32);
        }
    }
}

/// Cosine similarity, clamped to `[-1, 1]`.
///
/// Returns [`Error::ZeroNorm`] when either vector is all zeros; selectors treat
/// that as "not redundant".
pub fn cosine(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!("dims {} vs {}", a.len(), b.len())));
    }
    let mut dot = 0f64;
    let mut na = 0f64;
    let mut nb = 0f64;
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    // sqrt(na * nb) keeps the denominator symmetric in (a, b).
    Ok((dot / (na * nb).sqrt()).clamp(-1.0, 1.0))
}
