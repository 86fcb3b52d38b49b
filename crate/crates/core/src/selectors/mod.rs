//! Token selection strategies. Each produces a [`RetentionMask`] for the current
//! image of a consecutive pair; bit `j` set means patch `j` is kept.

pub mod prng;

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio;
use crate::features::{cosine, FeatureMap};
use crate::raster::{grids_compatible, PatchGrid};
use crate::rts::RtsModel;
use crate::{Error, Result};

pub use prng::CounterRng;

pub const MASK_MAGIC: &[u8; 4] = b"RVMK";
pub const DEFAULT_COSINE_THRESHOLD: f64 = 0.95;
pub const DEFAULT_RTS_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RetentionMask {
    bits: Vec<bool>,
    retained: usize,
}

impl RetentionMask {
    pub fn from_bits(bits: Vec<bool>) -> Self {
        let retained = bits.iter().filter(|&&b| b).count();
        Self { bits, retained }
    }

    pub fn keep_all(n: usize) -> Self {
        Self {
            bits: vec![true; n],
            retained: n,
        }
    }

    /// Keeps everything except the listed indices.
    pub fn dropping(n: usize, dropped: impl IntoIterator<Item = usize>) -> Self {
        let mut bits = vec![true; n];
        for j in dropped {
            bits[j] = false;
        }
        Self::from_bits(bits)
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn retained_count(&self) -> usize {
        self.retained
    }

    pub fn dropped_count(&self) -> usize {
        self.bits.len() - self.retained
    }

    pub fn is_retained(&self, j: usize) -> bool {
        self.bits[j]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// Retained indices in ascending order.
    pub fn retained_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().filter(|(_, &b)| b).map(|(j, _)| j)
    }

    /// LSB-first packed bits, `ceil(n / 8)` bytes.
    pub fn packed(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.bits.len().div_ceil(8)];
        for (j, _) in self.bits.iter().enumerate().filter(|(_, &b)| b) {
            out[j / 8] |= 1 << (j % 8);
        }
        out
    }

    /// `RVMK` format: magic, u32 LE patch count, packed bits.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MASK_MAGIC)?;
        w.write_all(&(self.bits.len() as u32).to_le_bytes())?;
        w.write_all(&self.packed())?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        binio::read_magic(r, MASK_MAGIC)?;
        let n = binio::read_u32(r, "n_patches")? as usize;
        let mut packed = vec![0u8; n.div_ceil(8)];
        binio::read_exact(r, &mut packed, "mask bits")?;
        binio::expect_eof(r)?;
        if !n.is_multiple_of(8) && packed[n / 8] >> (n % 8) != 0 {
            return Err(Error::CorruptFile("padding bits set in mask".into()));
        }
        Ok(Self::from_bits((0..n).map(|j| packed[j / 8] >> (j % 8) & 1 == 1).collect()))
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
}

/// A selection strategy and its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum SelectorConfig {
    NoDrop,
    Random { drop_fraction: f64, seed: u64 },
    Spiral { drop_fraction: f64 },
    /// Drop a patch iff every sample differs by at most `tolerance`.
    Pixel { tolerance: u8 },
    /// Drop a patch iff feature cosine similarity is `>= threshold`.
    Cosine { threshold: f64 },
    /// Drop a patch iff the classifier's redundancy probability is `>= threshold`.
    Rts { threshold: f64 },
}

impl SelectorConfig {
    pub fn kind(&self) -> &'static str {
        match self {
            SelectorConfig::NoDrop => "no-drop",
            SelectorConfig::Random { .. } => "random",
            SelectorConfig::Spiral { .. } => "spiral",
            SelectorConfig::Pixel { .. } => "pixel",
            SelectorConfig::Cosine { .. } => "cosine",
            SelectorConfig::Rts { .. } => "rts",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        match *self {
            SelectorConfig::Random { drop_fraction, .. } | SelectorConfig::Spiral { drop_fraction }
                if !(0.0..=1.0).contains(&drop_fraction) =>
            {
                bad(format!("drop_fraction {drop_fraction} outside [0, 1]"))
            }
            SelectorConfig::Cosine { threshold } if !(-1.0..=1.0).contains(&threshold) => {
                bad(format!("cosine threshold {threshold} outside [-1, 1]"))
            }
            SelectorConfig::Rts { threshold } if !(threshold > 0.0 && threshold < 1.0) => {
                bad(format!("rts threshold {threshold} outside (0, 1)"))
            }
            _ => Ok(()),
        }
    }

    /// Computes the mask for `pair.cur` relative to `pair.prev`.
    pub fn select(&self, pair: &FramePair<'_>, model: Option<&RtsModel>) -> Result<RetentionMask> {
        self.validate()?;
        if !grids_compatible(pair.prev_grid, pair.cur_grid) {
            return Err(Error::GridMismatch);
        }
        let n = pair.cur_grid.len();
        match *self {
            SelectorConfig::NoDrop => Ok(select_no_drop(n)),
            SelectorConfig::Random { drop_fraction, seed } => {
                Ok(select_random(n, drop_fraction, seed, pair.step_index))
            }
            SelectorConfig::Spiral { drop_fraction } => Ok(select_spiral(
                pair.cur_grid.rows(),
                pair.cur_grid.cols(),
                drop_fraction,
            )),
            SelectorConfig::Pixel { tolerance } => select_pixel(pair.prev_grid, pair.cur_grid, tolerance),
            SelectorConfig::Cosine { threshold } => {
                select_cosine(pair.prev_features, pair.cur_features, threshold)
            }
            SelectorConfig::Rts { threshold } => {
                let model = model.ok_or(Error::MissingModel)?;
                select_rts(pair.prev_features, pair.cur_features, model, threshold)
            }
        }
    }
}

impl Default for SelectorConfig {
    fn default() -> Self {
        SelectorConfig::Pixel { tolerance: 2 }
    }
}

/// The inputs every selector may draw on for one consecutive pair.
#[derive(Debug, Clone, Copy)]
pub struct FramePair<'a> {
    pub prev_grid: &'a PatchGrid,
    pub cur_grid: &'a PatchGrid,
    pub prev_features: &'a FeatureMap,
    pub cur_features: &'a FeatureMap,
    /// 1-based step number of the current image; keys the random selector.
    pub step_index: u64,
}

pub fn select_no_drop(n: usize) -> RetentionMask {
    RetentionMask::keep_all(n)
}

/// Number of patches a fractional drop removes: `floor(fraction × n)`.
pub fn drop_count(n: usize, drop_fraction: f64) -> usize {
    ((drop_fraction * n as f64).floor() as usize).min(n)
}

/// Drops exactly `floor(drop_fraction × n)` patches chosen by [`CounterRng`]
/// keyed on `(seed, step_index)`.
pub fn select_random(n: usize, drop_fraction: f64, seed: u64, step_index: u64) -> RetentionMask {
    let k = drop_count(n, drop_fraction);
    RetentionMask::dropping(n, CounterRng::new(seed, step_index).sample_indices(n, k))
}

/// Linear indices in clockwise inward spiral order from the top-left corner.
pub fn spiral_order(rows: usize, cols: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(rows * cols);
    if rows == 0 || cols == 0 {
        return out;
    }
    let (mut top, mut left) = (0usize, 0usize);
    let (mut bottom, mut right) = (rows - 1, cols - 1);
    loop {
        for c in left..=right {
            out.push(top * cols + c);
        }
        if top == bottom {
            break;
        }
        for r in top + 1..=bottom {
            out.push(r * cols + right);
        }
        if left == right {
            break;
        }
        for c in (left..right).rev() {
            out.push(bottom * cols + c);
        }
        for r in (top + 1..bottom).rev() {
            out.push(r * cols + left);
        }
        top += 1;
        left += 1;
        if top > bottom - 1 || left > right - 1 {
            break;
        }
        bottom -= 1;
        right -= 1;
    }
    out
}

/// Drops the first `floor(drop_fraction × n)` patches of [`spiral_order`]:
/// border first, center last.
pub fn select_spiral(rows: usize, cols: usize, drop_fraction: f64) -> RetentionMask {
    let n = rows * cols;
    let k = drop_count(n, drop_fraction);
    RetentionMask::dropping(n, spiral_order(rows, cols).into_iter().take(k))
}

/// Drops a patch iff every sample differs from the previous image by at most
/// `tolerance`.
pub fn select_pixel(prev: &PatchGrid, cur: &PatchGrid, tolerance: u8) -> Result<RetentionMask> {
    if !grids_compatible(prev, cur) || prev.channels() != cur.channels() {
        return Err(Error::GridMismatch);
    }
    let bits = prev
        .patches()
        .zip(cur.patches())
        .map(|(a, b)| a.iter().zip(b).any(|(&x, &y)| x.abs_diff(y) > tolerance))
        .collect();
    Ok(RetentionMask::from_bits(bits))
}

fn check_maps(prev: &FeatureMap, cur: &FeatureMap) -> Result<()> {
    if prev.n_patches() != cur.n_patches() || prev.dim() != cur.dim() {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            prev.n_patches(),
            prev.dim(),
            cur.n_patches(),
            cur.dim()
        )));
    }
    Ok(())
}

/// Drops a patch iff `cosine(prev[j], cur[j]) >= threshold`. Zero-norm pairs are kept.
pub fn select_cosine(prev: &FeatureMap, cur: &FeatureMap, threshold: f64) -> Result<RetentionMask> {
    check_maps(prev, cur)?;
    let bits = prev
        .iter()
        .zip(cur.iter())
        .map(|(a, b)| match cosine(a, b) {
            Ok(sim) => sim < threshold,
            Err(Error::ZeroNorm) => true,
            Err(_) => unreachable!("dims checked above"),
        })
        .collect();
    Ok(RetentionMask::from_bits(bits))
}

/// Drops a patch iff the model's redundancy probability is `>= threshold`.
pub fn select_rts(
    prev: &FeatureMap,
    cur: &FeatureMap,
    model: &RtsModel,
    threshold: f64,
) -> Result<RetentionMask> {
    check_maps(prev, cur)?;
    let probs = model.predict_maps(prev, cur)?;
    Ok(RetentionMask::from_bits(probs.into_iter().map(|p| p < threshold).collect()))
}
