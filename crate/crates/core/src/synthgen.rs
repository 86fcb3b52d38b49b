//! Synthetic GUI-like trajectories with planted, exactly known changes.
//!
//! Frame 1 is a flat desktop with panels, a title bar and text-like strokes.
//! Each later frame copies its predecessor and repaints exactly
//! `floor(change_fraction × n_patches)` patches. Every repainted patch differs
//! from the previous frame by at least [`MIN_SAMPLE_DELTA`] in some sample, so
//! tolerance-0 pixel diffing recovers the changed sets exactly.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::features::{self, FeatureSpec};
use crate::raster::{decompose, GridSpec, PadPolicy, PatchGrid, PixelRect, Raster};
use crate::rts::{AnnotationSet, Region, RegionAnnotation, TrainingSample};
use crate::sequence::{Episode, Manifest, ManifestStep, Observation, Step, Trajectory, MANIFEST_SCHEMA_VERSION};
use crate::{Error, Result};

/// Lower bound on the largest per-sample change inside every repainted patch.
pub const MIN_SAMPLE_DELTA: u8 = 32;

/// Region id of the full-frame background in emitted annotations.
pub const BACKGROUND_REGION: u32 = 0;
/// Changed blocks of step `t` get ids starting at `CHANGE_REGION_BASE * t`.
pub const CHANGE_REGION_BASE: u32 = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegionStyle {
    /// Changes grouped into patch-aligned rectangles.
    #[default]
    RectBlocks,
    /// Changes at independent random patches.
    ScatteredPatches,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub width: u32,
    pub height: u32,
    pub channels: u32,
    pub patch_size: u32,
    pub n_steps: usize,
    pub change_fraction: f64,
    pub region_style: RegionStyle,
    pub seed: u64,
    /// Words of step text emitted per step.
    pub text_words: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            width: 448,
            height: 448,
            channels: 3,
            patch_size: 28,
            n_steps: 8,
            change_fraction: 0.25,
            region_style: RegionStyle::RectBlocks,
            seed: 0,
            text_words: 12,
        }
    }
}

impl SynthSpec {
    pub fn rows(&self) -> usize {
        self.height.div_ceil(self.patch_size) as usize
    }

    pub fn cols(&self) -> usize {
        self.width.div_ceil(self.patch_size) as usize
    }

    pub fn n_patches(&self) -> usize {
        self.rows() * self.cols()
    }

    /// `floor(change_fraction × n_patches)`, the exact per-step change count.
    pub fn changes_per_step(&self) -> usize {
        ((self.change_fraction * self.n_patches() as f64).floor() as usize).min(self.n_patches())
    }

    pub fn grid_spec(&self) -> GridSpec {
        GridSpec::new(self.patch_size, PadPolicy::ZeroPad)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.to_string()));
        if self.width == 0 || self.height == 0 {
            return bad("width and height must be >= 1");
        }
        if self.patch_size == 0 {
            return bad("patch_size must be >= 1");
        }
        if self.channels != 1 && self.channels != 3 {
            return bad("channels must be 1 or 3");
        }
        if self.n_steps == 0 {
            return bad("n_steps must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.change_fraction) {
            return bad("change_fraction must be in [0, 1]");
        }
        Ok(())
    }
}

/// A planted change, in pixel coordinates. Repaints never move content, so the
/// old and new boxes coincide; both are kept for consumers that track motion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChangeBlock {
    pub old: PixelRect,
    pub new: PixelRect,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// `changed[t - 1]` holds the sorted patch indices repainted at step `t`
    /// (empty for step 1).
    pub changed: Vec<Vec<usize>>,
    pub blocks: Vec<Vec<ChangeBlock>>,
}

#[derive(Debug, Clone)]
pub struct SynthTrajectory {
    pub spec: SynthSpec,
    pub trajectory: Trajectory,
    pub frames: Vec<Raster>,
    pub annotations: AnnotationSet,
    pub ground_truth: GroundTruth,
}

impl SynthTrajectory {
    pub fn episode(&self, feat_spec: &FeatureSpec) -> Result<Episode> {
        let grid_spec = self.spec.grid_spec();
        let obs = self
            .frames
            .iter()
            .map(|f| Observation::from_raster(f, &grid_spec, feat_spec))
            .collect::<Result<Vec<_>>>()?;
        Episode::new(self.trajectory.clone(), obs)
    }

    pub fn grids(&self) -> Result<Vec<PatchGrid>> {
        let spec = self.spec.grid_spec();
        self.frames.iter().map(|f| decompose(f, &spec)).collect()
    }

    /// Writes rasters, annotations, ground truth, and a manifest into `dir`.
    pub fn write_to_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join("frames"))?;
        let mut steps = Vec::with_capacity(self.frames.len());
        for (frame, step) in self.frames.iter().zip(&self.trajectory.steps) {
            let rel = format!("frames/{}.rvr", step.image);
            frame.save(dir.join(&rel))?;
            steps.push(ManifestStep {
                index: step.index,
                image: rel,
                features: None,
                text: step.text.clone(),
                action: step.action.clone(),
                regions: Some("regions.txt".into()),
            });
        }
        std::fs::write(dir.join("regions.txt"), self.annotations.to_text())?;
        std::fs::write(
            dir.join("ground_truth.json"),
            serde_json::to_string_pretty(&self.ground_truth)? + "\n",
        )?;
        std::fs::write(dir.join("synth_spec.json"), serde_json::to_string_pretty(&self.spec)? + "\n")?;
        Manifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            task: self.trajectory.task.clone(),
            patch_size: self.spec.patch_size,
            pad_policy: PadPolicy::ZeroPad,
            steps,
        }
        .save(dir.join("manifest.json"))
    }
}

struct Painter<'a> {
    img: &'a mut Raster,
}

impl Painter<'_> {
    fn fill(&mut self, r: PixelRect, color: [u8; 3]) {
        let ch = self.img.channels();
        for y in r.y0..r.y1.min(self.img.height()) {
            for x in r.x0..r.x1.min(self.img.width()) {
                for c in 0..ch {
                    self.img.set_sample(x, y, c, color[c as usize]);
                }
            }
        }
    }
}

fn random_color(rng: &mut ChaCha8Rng, channels: u32) -> [u8; 3] {
    let c: [u8; 3] = rng.gen();
    if channels == 1 {
        [c[0]; 3]
    } else {
        c
    }
}

fn base_frame(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Result<(Raster, Vec<PixelRect>)> {
    let (w, h, ps) = (spec.width, spec.height, spec.patch_size);
    let mut img = Raster::filled(w, h, spec.channels, 0)?;
    let mut p = Painter { img: &mut img };
    p.fill(PixelRect::new(0, 0, w, h), random_color(rng, spec.channels));
    // Title bar: one patch row.
    p.fill(PixelRect::new(0, 0, w, ps.min(h)), random_color(rng, spec.channels));

    let (rows, cols) = (spec.rows() as u32, spec.cols() as u32);
    let mut panels = Vec::new();
    if rows > 2 && cols > 1 {
        for _ in 0..rng.gen_range(2..6) {
            let pr0 = rng.gen_range(1..rows - 1);
            let pr1 = rng.gen_range(pr0 + 1..=rows);
            let pc0 = rng.gen_range(0..cols - 1);
            let pc1 = rng.gen_range(pc0 + 1..=cols);
            let rect = PixelRect::new(pc0 * ps, pr0 * ps, (pc1 * ps).min(w), (pr1 * ps).min(h));
            p.fill(rect, random_color(rng, spec.channels));
            // Text-like strokes inside the panel.
            let ink = random_color(rng, spec.channels);
            let mut y = rect.y0 + 3;
            while y + 2 < rect.y1 {
                let len = rng.gen_range(1..=rect.width().max(1));
                let x0 = rect.x0 + rng.gen_range(0..=rect.width() - len);
                p.fill(PixelRect::new(x0, y, x0 + len, y + 2), ink);
                y += rng.gen_range(5..12);
            }
            panels.push(rect);
        }
    }
    Ok((img, panels))
}

fn patch_mean(img: &Raster, r: PixelRect) -> f64 {
    let ch = img.channels();
    let mut sum = 0u64;
    for y in r.y0..r.y1 {
        for x in r.x0..r.x1 {
            for c in 0..ch {
                sum += img.sample(x, y, c) as u64;
            }
        }
    }
    sum as f64 / (r.area() * ch as u64) as f64
}

/// Repaints one patch so that it differs from its previous content.
fn repaint(img: &mut Raster, r: PixelRect, rng: &mut ChaCha8Rng) {
    let ch = img.channels();
    let old: Vec<u8> = (r.y0..r.y1)
        .flat_map(|y| (r.x0..r.x1).flat_map(move |x| (0..ch).map(move |c| (x, y, c))))
        .map(|(x, y, c)| img.sample(x, y, c))
        .collect();
    let old_mean = old.iter().map(|&v| v as f64).sum::<f64>() / old.len() as f64;

    for _ in 0..16 {
        let fill = random_color(rng, ch);
        let ink = random_color(rng, ch);
        let mut p = Painter { img };
        p.fill(r, fill);
        let mut y = r.y0 + rng.gen_range(0..r.height().max(1));
        while y < r.y1 {
            p.fill(PixelRect::new(r.x0, y, r.x1, (y + 2).min(r.y1)), ink);
            y += rng.gen_range(4..10);
        }
        if (patch_mean(img, r) - old_mean).abs() >= MIN_SAMPLE_DELTA as f64 {
            return;
        }
    }
    // Fallback: shift every sample by half the range.
    let mut i = 0;
    for y in r.y0..r.y1 {
        for x in r.x0..r.x1 {
            for c in 0..ch {
                img.set_sample(x, y, c, old[i].wrapping_add(128));
                i += 1;
            }
        }
    }
}

fn choose_rect_blocks(
    spec: &SynthSpec,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<usize>> {
    let (rows, cols) = (spec.rows(), spec.cols());
    let n = rows * cols;
    let mut taken = vec![false; n];
    let mut remaining = count;
    let mut blocks = Vec::new();
    let mut attempts = 0;
    while remaining > 0 && attempts < 64 * (count + 1) {
        attempts += 1;
        let bh = rng.gen_range(1..=rows.min(4));
        let bw = rng.gen_range(1..=cols.min(8));
        let r0 = rng.gen_range(0..=rows - bh);
        let c0 = rng.gen_range(0..=cols - bw);
        let mut block = Vec::new();
        'outer: for r in r0..r0 + bh {
            for c in c0..c0 + bw {
                if block.len() == remaining {
                    break 'outer;
                }
                let j = r * cols + c;
                if !taken[j] {
                    taken[j] = true;
                    block.push(j);
                }
            }
        }
        remaining -= block.len();
        if !block.is_empty() {
            blocks.push(block);
        }
    }
    if remaining > 0 {
        let mut free: Vec<usize> = (0..n).filter(|&j| !taken[j]).collect();
        free.shuffle(rng);
        blocks.extend(free.into_iter().take(remaining).map(|j| vec![j]));
    }
    blocks
}

/// Splits a set of patch indices into per-row runs, as pixel rectangles.
fn runs_to_rects(spec: &SynthSpec, patches: &[usize]) -> Vec<PixelRect> {
    let cols = spec.cols();
    let ps = spec.patch_size;
    let mut by_row: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &j in patches {
        by_row.entry(j / cols).or_default().push(j % cols);
    }
    let mut out = Vec::new();
    for (r, mut cs) in by_row {
        cs.sort_unstable();
        let mut start = cs[0];
        for i in 1..=cs.len() {
            if i == cs.len() || cs[i] != cs[i - 1] + 1 {
                let end = cs[i - 1] + 1;
                out.push(PixelRect::new(
                    start as u32 * ps,
                    r as u32 * ps,
                    (end as u32 * ps).min(spec.width),
                    ((r as u32 + 1) * ps).min(spec.height),
                ));
                if i < cs.len() {
                    start = cs[i];
                }
            }
        }
    }
    out
}

const WORDS: &[&str] = &[
    "click", "the", "menu", "open", "settings", "scroll", "down", "type", "into", "field", "select",
    "button", "save", "window", "tab", "then", "confirm", "dialog", "search", "result",
];

pub fn generate(spec: &SynthSpec) -> Result<SynthTrajectory> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (first, panels) = base_frame(spec, &mut rng)?;
    let n = spec.n_patches();
    let count = spec.changes_per_step();
    let ps = spec.patch_size;
    let patch_rect = |j: usize| {
        let (r, c) = ((j / spec.cols()) as u32, (j % spec.cols()) as u32);
        PixelRect::new(c * ps, r * ps, ((c + 1) * ps).min(spec.width), ((r + 1) * ps).min(spec.height))
    };

    let full = PixelRect::new(0, 0, spec.width, spec.height);
    let static_regions: Vec<Region> = std::iter::once(Region { id: BACKGROUND_REGION, rect: full })
        .chain(panels.iter().enumerate().map(|(i, &rect)| Region { id: i as u32 + 1, rect }))
        .collect();

    let mut frames = vec![first];
    let mut changed = vec![Vec::new()];
    let mut blocks = vec![Vec::new()];
    let mut annotations = AnnotationSet::default();
    annotations.images.insert("1".into(), RegionAnnotation::new(static_regions.clone()));

    for t in 2..=spec.n_steps {
        let mut frame = frames.last().expect("at least one frame").clone();
        let groups: Vec<Vec<usize>> = match spec.region_style {
            RegionStyle::RectBlocks => choose_rect_blocks(spec, count, &mut rng),
            RegionStyle::ScatteredPatches => {
                let mut all: Vec<usize> = (0..n).collect();
                all.shuffle(&mut rng);
                all.into_iter().take(count).map(|j| vec![j]).collect()
            }
        };
        let mut step_changed: Vec<usize> = groups.iter().flatten().copied().collect();
        step_changed.sort_unstable();
        for &j in &step_changed {
            repaint(&mut frame, patch_rect(j), &mut rng);
        }
        let mut step_blocks = Vec::new();
        for g in &groups {
            for rect in runs_to_rects(spec, g) {
                step_blocks.push(ChangeBlock { old: rect, new: rect });
            }
        }
        let mut regions = static_regions.clone();
        regions.extend(step_blocks.iter().enumerate().map(|(i, b)| Region {
            id: CHANGE_REGION_BASE * t as u32 + i as u32,
            rect: b.new,
        }));
        annotations.images.insert(t.to_string(), RegionAnnotation::new(regions));
        frames.push(frame);
        changed.push(step_changed);
        blocks.push(step_blocks);
    }

    let steps = (1..=spec.n_steps)
        .map(|t| {
            let text = (0..spec.text_words)
                .map(|_| *WORDS.choose(&mut rng).expect("word list is non-empty"))
                .collect::<Vec<_>>()
                .join(" ");
            Step {
                index: t,
                image: format!("step-{t:04}"),
                text,
                action: serde_json::json!({
                    "type": "click",
                    "x": rng.gen_range(0..spec.width),
                    "y": rng.gen_range(0..spec.height),
                }),
            }
        })
        .collect();

    Ok(SynthTrajectory {
        spec: spec.clone(),
        trajectory: Trajectory {
            task: format!("synthetic task {}", spec.seed),
            steps,
        },
        frames,
        annotations,
        ground_truth: GroundTruth { changed, blocks },
    })
}

/// One sample per (consecutive pair, patch); label is "not planted as changed".
pub fn make_training_set(spec: &SynthSpec, feat_spec: &FeatureSpec) -> Result<Vec<TrainingSample>> {
    let synth = generate(spec)?;
    let grids = synth.grids()?;
    let feats = grids
        .iter()
        .map(|g| features::extract(g, feat_spec))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity((spec.n_steps.saturating_sub(1)) * spec.n_patches());
    for t in 1..feats.len() {
        let changed = &synth.ground_truth.changed[t];
        let mut label = vec![true; spec.n_patches()];
        for &j in changed {
            label[j] = false;
        }
        for (j, (p, c)) in feats[t - 1].iter().zip(feats[t].iter()).enumerate() {
            out.push(TrainingSample::new(p.to_vec(), c.to_vec(), label[j]));
        }
    }
    Ok(out)
}

/// Stratified subsample with equally many redundant and changed samples. The
/// majority class is drawn without replacement; order is shuffled.
pub fn balance_samples(samples: Vec<TrainingSample>, seed: u64) -> Vec<TrainingSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut pos, mut neg): (Vec<_>, Vec<_>) = samples.into_iter().partition(|s| s.label);
    let k = pos.len().min(neg.len());
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    pos.truncate(k);
    neg.truncate(k);
    let mut out: Vec<_> = pos.into_iter().chain(neg).collect();
    out.shuffle(&mut rng);
    out
}

/// Training samples for several seeds of one spec.
pub fn make_corpus_samples(
    spec: &SynthSpec,
    seeds: impl IntoIterator<Item = u64>,
    feat_spec: &FeatureSpec,
) -> Result<Vec<TrainingSample>> {
    let mut out = Vec::new();
    for seed in seeds {
        out.extend(make_training_set(&SynthSpec { seed, ..spec.clone() }, feat_spec)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rts::{generate_labels, match_regions};
    use crate::selectors::select_pixel;

    fn small(change_fraction: f64, style: RegionStyle, seed: u64) -> SynthSpec {
        SynthSpec {
            width: 64,
            height: 64,
            channels: 3,
            patch_size: 16,
            n_steps: 5,
            change_fraction,
            region_style: style,
            seed,
            text_words: 4,
        }
    }

    /// Exhaustive per-patch raster diff, independent of the selector code.
    fn raster_diff(a: &Raster, b: &Raster, ps: u32) -> Vec<usize> {
        let cols = a.width().div_ceil(ps);
        let mut out = std::collections::BTreeSet::new();
        for y in 0..a.height() {
            for x in 0..a.width() {
                for c in 0..a.channels() {
                    if a.sample(x, y, c) != b.sample(x, y, c) {
                        out.insert(((y / ps) * cols + x / ps) as usize);
                    }
                }
            }
        }
        out.into_iter().collect()
    }

    #[test]
    fn zero_change_means_identical_frames() {
        let s = generate(&small(0.0, RegionStyle::RectBlocks, 1)).unwrap();
        assert!(s.frames.windows(2).all(|w| w[0] == w[1]));
        assert!(s.ground_truth.changed.iter().all(Vec::is_empty));
    }

    #[test]
    fn full_change_touches_every_patch() {
        let s = generate(&small(1.0, RegionStyle::RectBlocks, 2)).unwrap();
        for t in 1..s.frames.len() {
            assert_eq!(s.ground_truth.changed[t], (0..16).collect::<Vec<_>>());
            assert_eq!(raster_diff(&s.frames[t - 1], &s.frames[t], 16).len(), 16);
        }
    }

    #[test]
    fn quarter_change_on_four_by_four() {
        for style in [RegionStyle::RectBlocks, RegionStyle::ScatteredPatches] {
            for seed in 0..20 {
                let s = generate(&small(0.25, style, seed)).unwrap();
                for t in 1..s.frames.len() {
                    assert_eq!(s.ground_truth.changed[t].len(), 4);
                    assert_eq!(raster_diff(&s.frames[t - 1], &s.frames[t], 16), s.ground_truth.changed[t]);
                }
            }
        }
    }

    #[test]
    fn blocks_cover_exactly_the_changed_patches() {
        let spec = SynthSpec {
            width: 200,
            height: 130,
            patch_size: 20,
            change_fraction: 0.37,
            ..small(0.0, RegionStyle::RectBlocks, 5)
        };
        let s = generate(&spec).unwrap();
        let grids = s.grids().unwrap();
        for t in 1..s.frames.len() {
            let mut covered: Vec<usize> = (0..grids[t].len())
                .filter(|&j| {
                    let r = grids[t].patch_rect(j);
                    s.ground_truth.blocks[t].iter().any(|b| b.new.contains_rect(&r))
                })
                .collect();
            covered.sort_unstable();
            assert_eq!(covered, s.ground_truth.changed[t]);
        }
    }

    #[test]
    fn deterministic_by_seed() {
        let a = generate(&small(0.3, RegionStyle::RectBlocks, 11)).unwrap();
        let b = generate(&small(0.3, RegionStyle::RectBlocks, 11)).unwrap();
        assert_eq!(a.frames, b.frames);
        assert_eq!(a.ground_truth, b.ground_truth);
        let c = generate(&small(0.3, RegionStyle::RectBlocks, 12)).unwrap();
        assert_ne!(a.frames, c.frames);
    }

    #[test]
    fn pixel_oracle_and_region_labels_agree_with_ground_truth() {
        let spec = SynthSpec {
            width: 100,
            height: 90,
            patch_size: 10,
            ..small(0.3, RegionStyle::RectBlocks, 3)
        };
        let s = generate(&spec).unwrap();
        let grids = s.grids().unwrap();
        for t in 1..grids.len() {
            let m = select_pixel(&grids[t - 1], &grids[t], 0).unwrap();
            let retained: Vec<usize> = m.retained_indices().collect();
            assert_eq!(retained, s.ground_truth.changed[t]);

            let prev_ann = s.annotations.get(&t.to_string()).unwrap();
            let cur_ann = s.annotations.get(&(t + 1).to_string()).unwrap();
            let matches = match_regions(prev_ann, cur_ann, 0.5);
            let labels = generate_labels(&grids[t - 1], &grids[t], &matches, 0.5, 2).unwrap();
            let unlabeled: Vec<usize> = (0..labels.len()).filter(|&j| !labels[j]).collect();
            assert_eq!(unlabeled, s.ground_truth.changed[t]);
        }
    }

    #[test]
    fn training_set_counts() {
        let spec = SynthSpec {
            n_steps: 2,
            ..small(0.25, RegionStyle::ScatteredPatches, 4)
        };
        let samples = make_training_set(&spec, &FeatureSpec::PixelStats).unwrap();
        assert_eq!(samples.len(), 16);
        assert_eq!(samples.iter().filter(|s| s.label).count(), 12);
        let none = make_training_set(&SynthSpec { change_fraction: 0.0, ..spec }, &FeatureSpec::PixelStats).unwrap();
        assert!(none.iter().all(|s| s.label));
    }

    #[test]
    fn balanced_builder() {
        let spec = small(0.3, RegionStyle::RectBlocks, 8);
        let samples = make_corpus_samples(&spec, 0..4, &FeatureSpec::PixelStats).unwrap();
        let balanced = balance_samples(samples, 1);
        let pos = balanced.iter().filter(|s| s.label).count();
        let neg = balanced.len() - pos;
        assert!(pos.abs_diff(neg) <= 1);
        assert!(pos > 0);
    }

    #[test]
    fn invalid_specs() {
        assert!(generate(&SynthSpec { n_steps: 0, ..SynthSpec::default() }).is_err());
        assert!(generate(&SynthSpec { change_fraction: 1.5, ..SynthSpec::default() }).is_err());
        assert!(generate(&SynthSpec { channels: 2, ..SynthSpec::default() }).is_err());
        assert!(matches!(generate(&SynthSpec { patch_size: 0, ..SynthSpec::default() }), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn writes_loadable_directory() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate(&small(0.25, RegionStyle::RectBlocks, 6)).unwrap();
        s.write_to_dir(dir.path()).unwrap();
        let ep = crate::sequence::load_episode(
            &dir.path().join("manifest.json"),
            &FeatureSpec::PixelStats,
            &|p| Raster::load(p),
        )
        .unwrap();
        assert_eq!(ep.len(), 5);
        assert_eq!(ep.observation(3).grid, s.grids().unwrap()[2]);
        let ann = AnnotationSet::load(dir.path().join("regions.txt")).unwrap();
        assert_eq!(ann, s.annotations);
    }
}
