//! Trajectories, history windows, and assembly of the filtered multimodal input.
//!
//! Within a window the oldest image is kept whole. Every later image is masked
//! against the unfiltered features of the image just before it, and retained
//! tokens keep their original grid position ids. Text context always spans the
//! whole trajectory prefix; only images are windowed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::features::{self, FeatureMap, FeatureSpec};
use crate::raster::{decompose, grids_compatible, GridSpec, PadPolicy, PatchGrid, Raster};
use crate::rts::RtsModel;
use crate::selectors::{FramePair, RetentionMask, SelectorConfig};
use crate::{Error, Result};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
/// History length used when none is given.
pub const DEFAULT_HISTORY: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    /// 1-based, contiguous within a trajectory.
    pub index: usize,
    pub image: String,
    /// Reasoning and action text for this step.
    pub text: String,
    #[serde(default)]
    pub action: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task: String,
    pub steps: Vec<Step>,
}

impl Trajectory {
    pub fn validate(&self) -> Result<()> {
        if self.steps.is_empty() {
            return Err(Error::InvalidConfig("trajectory has no steps".into()));
        }
        for (i, s) in self.steps.iter().enumerate() {
            if s.index != i + 1 {
                return Err(Error::InvalidConfig(format!(
                    "step at position {} has index {}, expected {}",
                    i,
                    s.index,
                    i + 1
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// The images visible at one step: `max(1, step - k + 1)..=step`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub step: usize,
    pub k: usize,
    pub image_steps: Vec<usize>,
}

pub fn build_window(traj: &Trajectory, step: usize, k: usize) -> Result<Window> {
    if step == 0 || step > traj.len() {
        return Err(Error::StepOutOfRange {
            step,
            len: traj.len(),
        });
    }
    if k == 0 {
        return Err(Error::InvalidConfig("history size k must be >= 1".into()));
    }
    let first = step.saturating_sub(k - 1).max(1);
    Ok(Window {
        step,
        k,
        image_steps: (first..=step).collect(),
    })
}

/// Counts text tokens. The tokenizer is model specific, so it is pluggable.
pub trait TokenCounter {
    fn count(&self, text: &str) -> usize;
}

/// Counts whitespace-delimited words.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceCounter;

impl TokenCounter for WhitespaceCounter {
    fn count(&self, text: &str) -> usize {
        text.split_whitespace().count()
    }
}

/// One decoded screenshot: its patch grid and per-patch features.
#[derive(Debug, Clone)]
pub struct Observation {
    pub grid: PatchGrid,
    pub features: FeatureMap,
}

impl Observation {
    pub fn from_raster(image: &Raster, grid_spec: &GridSpec, feat_spec: &FeatureSpec) -> Result<Self> {
        let grid = decompose(image, grid_spec)?;
        let features = features::extract(&grid, feat_spec)?;
        Ok(Self { grid, features })
    }
}

/// A trajectory with one observation per step.
#[derive(Debug, Clone)]
pub struct Episode {
    pub trajectory: Trajectory,
    pub observations: Vec<Observation>,
}

impl Episode {
    pub fn new(trajectory: Trajectory, observations: Vec<Observation>) -> Result<Self> {
        trajectory.validate()?;
        if observations.len() != trajectory.len() {
            return Err(Error::InvalidConfig(format!(
                "{} observations for {} steps",
                observations.len(),
                trajectory.len()
            )));
        }
        for o in &observations {
            if o.features.n_patches() != o.grid.len() {
                return Err(Error::PatchCountMismatch {
                    expected: o.grid.len(),
                    actual: o.features.n_patches(),
                });
            }
        }
        Ok(Self {
            trajectory,
            observations,
        })
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    /// Observation for a 1-based step.
    pub fn observation(&self, step: usize) -> &Observation {
        &self.observations[step - 1]
    }

    /// The pair `(step - 1, step)` as selector input.
    pub fn pair(&self, step: usize) -> FramePair<'_> {
        let (prev, cur) = (self.observation(step - 1), self.observation(step));
        FramePair {
            prev_grid: &prev.grid,
            cur_grid: &cur.grid,
            prev_features: &prev.features,
            cur_features: &cur.features,
            step_index: step as u64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "segment")]
pub enum TextSegment {
    Text { tokens: usize },
    /// One `<image>` placeholder at the step the image belongs to.
    Image { step: usize },
}

/// Which features a mask was computed against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskReference {
    pub step: usize,
    pub feature_digest: u64,
    /// Number of predecessor feature vectors the selector saw.
    pub n_vectors: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub step: usize,
    pub n_patches: usize,
    /// Indices into this image's visual tokens.
    pub token_ids: Vec<u32>,
    /// Original grid positions of the retained tokens.
    pub position_ids: Vec<u32>,
    #[serde(with = "mask_bits")]
    pub mask: RetentionMask,
    /// Digest of this image's unfiltered features.
    pub feature_digest: u64,
    /// `None` for the window's first image.
    pub reference: Option<MaskReference>,
}

impl ImageEntry {
    pub fn retained(&self) -> usize {
        self.token_ids.len()
    }
}

mod mask_bits {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::selectors::RetentionMask;

    pub fn serialize<S: Serializer>(m: &RetentionMask, s: S) -> Result<S::Ok, S::Error> {
        m.bits().iter().map(|&b| if b { '1' } else { '0' }).collect::<String>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<RetentionMask, D::Error> {
        let s = String::deserialize(d)?;
        s.chars()
            .map(|c| match c {
                '1' => Ok(true),
                '0' => Ok(false),
                other => Err(serde::de::Error::custom(format!("bad mask char {other:?}"))),
            })
            .collect::<Result<Vec<_>, _>>()
            .map(RetentionMask::from_bits)
    }
}

/// The assembled input for one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilteredSequence {
    pub step: usize,
    pub k: usize,
    pub selector: SelectorConfig,
    pub layout: Vec<TextSegment>,
    pub text_tokens: usize,
    pub images: Vec<ImageEntry>,
}

/// Stable 64-bit digest of a feature map's shape and values.
pub fn feature_digest(f: &FeatureMap) -> u64 {
    let mut h = Sha256::new();
    h.update((f.n_patches() as u64).to_le_bytes());
    h.update((f.dim() as u64).to_le_bytes());
    for v in f.as_slice() {
        h.update(v.to_le_bytes());
    }
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("sha256 yields 32 bytes"))
}

fn text_layout(
    traj: &Trajectory,
    window: &Window,
    counter: &dyn TokenCounter,
) -> (Vec<TextSegment>, usize) {
    let mut layout = vec![TextSegment::Text {
        tokens: counter.count(&traj.task),
    }];
    for s in &traj.steps[..window.step] {
        if window.image_steps.contains(&s.index) {
            layout.push(TextSegment::Image { step: s.index });
        }
        layout.push(TextSegment::Text {
            tokens: counter.count(&s.text),
        });
    }
    let total = layout
        .iter()
        .map(|seg| match seg {
            TextSegment::Text { tokens } => *tokens,
            TextSegment::Image { .. } => 0,
        })
        .sum();
    (layout, total)
}

/// Builds the filtered input for `window`.
pub fn assemble(
    episode: &Episode,
    window: &Window,
    selector: &SelectorConfig,
    model: Option<&RtsModel>,
    counter: &dyn TokenCounter,
) -> Result<FilteredSequence> {
    selector.validate()?;
    if matches!(selector, SelectorConfig::Rts { .. }) && model.is_none() {
        return Err(Error::MissingModel);
    }
    if window.step == 0 || window.step > episode.len() {
        return Err(Error::StepOutOfRange {
            step: window.step,
            len: episode.len(),
        });
    }
    let first = *window
        .image_steps
        .first()
        .ok_or_else(|| Error::InvalidConfig("window has no images".into()))?;
    let anchor = &episode.observation(first).grid;
    for &s in &window.image_steps {
        if !grids_compatible(anchor, &episode.observation(s).grid) {
            return Err(Error::GridMismatch);
        }
    }

    let (layout, text_tokens) = text_layout(&episode.trajectory, window, counter);
    let mut images = Vec::with_capacity(window.image_steps.len());
    let mut prev: Option<(usize, u64)> = None;
    for &s in &window.image_steps {
        let obs = episode.observation(s);
        let digest = feature_digest(&obs.features);
        let n = obs.grid.len();
        let (mask, reference) = match prev {
            None => (RetentionMask::keep_all(n), None),
            Some((prev_step, prev_digest)) => {
                let pair = episode.pair(s);
                let mask = selector.select(&pair, model)?;
                let reference = MaskReference {
                    step: prev_step,
                    feature_digest: prev_digest,
                    n_vectors: pair.prev_features.n_patches(),
                };
                (mask, Some(reference))
            }
        };
        let ids: Vec<u32> = mask.retained_indices().map(|j| j as u32).collect();
        images.push(ImageEntry {
            step: s,
            n_patches: n,
            position_ids: ids.clone(),
            token_ids: ids,
            mask,
            feature_digest: digest,
            reference,
        });
        prev = Some((s, digest));
    }

    Ok(FilteredSequence {
        step: window.step,
        k: window.k,
        selector: *selector,
        layout,
        text_tokens,
        images,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenTotals {
    pub visual_tokens: usize,
    pub text_tokens: usize,
    pub total: usize,
    pub visual_fraction: f64,
}

pub fn token_totals(seq: &FilteredSequence) -> TokenTotals {
    let visual = seq.images.iter().map(ImageEntry::retained).sum();
    let total = visual + seq.text_tokens;
    TokenTotals {
        visual_tokens: visual,
        text_tokens: seq.text_tokens,
        total,
        visual_fraction: if total == 0 { 0.0 } else { visual as f64 / total as f64 },
    }
}

/// True iff every mask after the first was computed against the full, unfiltered
/// features of the chronologically previous image.
pub fn comparison_chain_check(seq: &FilteredSequence) -> bool {
    let Some(first) = seq.images.first() else {
        return true;
    };
    if first.reference.is_some() || first.retained() != first.n_patches {
        return false;
    }
    seq.images.windows(2).all(|w| {
        let (prev, cur) = (&w[0], &w[1]);
        match cur.reference {
            Some(r) => {
                cur.step == prev.step + 1
                    && r.step == prev.step
                    && r.feature_digest == prev.feature_digest
                    && r.n_vectors == prev.n_patches
            }
            None => false,
        }
    })
}

/// Checks the structural invariants of an assembled sequence: the first image
/// is whole, and each image's ids are exactly its mask's retained indices.
pub fn check_structure(seq: &FilteredSequence) -> std::result::Result<(), String> {
    if let Some(first) = seq.images.first() {
        if first.mask.retained_count() != first.n_patches {
            return Err(format!("first image (step {}) is not fully retained", first.step));
        }
    }
    for e in &seq.images {
        if e.mask.len() != e.n_patches {
            return Err(format!("step {}: mask length {} != {}", e.step, e.mask.len(), e.n_patches));
        }
        let expected: Vec<u32> = e.mask.retained_indices().map(|j| j as u32).collect();
        if e.token_ids != expected {
            return Err(format!("step {}: token ids differ from mask", e.step));
        }
        if e.position_ids != expected {
            return Err(format!("step {}: position ids are not the original positions", e.step));
        }
        if e.position_ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(format!("step {}: position ids not strictly increasing", e.step));
        }
    }
    Ok(())
}

/// On-disk description of a trajectory. Paths are relative to the manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub task: String,
    #[serde(default = "default_patch_size")]
    pub patch_size: u32,
    #[serde(default)]
    pub pad_policy: PadPolicy,
    pub steps: Vec<ManifestStep>,
}

fn default_patch_size() -> u32 {
    crate::raster::DEFAULT_PATCH_SIZE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestStep {
    pub index: usize,
    /// Raster file (`.rvr`, or any format the caller's loader accepts).
    pub image: String,
    /// Optional `RVFT` feature blob replacing built-in extraction.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<String>,
    #[serde(default)]
    pub text: String,
    #[serde(default)]
    pub action: serde_json::Value,
    /// Optional region annotation file; this step's image id is its index.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regions: Option<String>,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        if m.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                message: format!("unsupported schema_version {}", m.schema_version),
            });
        }
        m.trajectory().validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn trajectory(&self) -> Trajectory {
        Trajectory {
            task: self.task.clone(),
            steps: self
                .steps
                .iter()
                .map(|s| Step {
                    index: s.index,
                    image: s.image.clone(),
                    text: s.text.clone(),
                    action: s.action.clone(),
                })
                .collect(),
        }
    }

    pub fn grid_spec(&self) -> GridSpec {
        GridSpec::new(self.patch_size, self.pad_policy)
    }
}

/// Loads every step of a manifest. `load_image` decodes image paths; features
/// come from the step's blob when present, otherwise from `feat_spec`.
pub fn load_episode(
    manifest_path: &Path,
    feat_spec: &FeatureSpec,
    load_image: &dyn Fn(&Path) -> Result<Raster>,
) -> Result<Episode> {
    let manifest = Manifest::load(manifest_path)?;
    let base = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let grid_spec = manifest.grid_spec();
    let mut observations = Vec::with_capacity(manifest.steps.len());
    for s in &manifest.steps {
        let image = load_image(&resolve(&base, &s.image))?;
        let grid = decompose(&image, &grid_spec)?;
        let features = match &s.features {
            Some(p) => features::load_external(resolve(&base, p), grid.len())?,
            None => features::extract(&grid, feat_spec)?,
        };
        observations.push(Observation { grid, features });
    }
    Episode::new(manifest.trajectory(), observations)
}

pub fn resolve(base: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}
