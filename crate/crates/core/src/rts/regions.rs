//! Region annotations, IoU matching, and patch label generation.
//!
//! Annotation files are plain text, one region per line:
//! `image_id region_id x0 y0 x1 y1` with half-open pixel coordinates. Blank lines
//! and lines starting with `#` are ignored.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::raster::{grids_compatible, PatchGrid, PixelRect};
use crate::{Error, Result};

/// Default IoU a region pair needs to count as the same content.
pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;
/// Default per-sample tolerance (in 8-bit units) for labeling a patch unchanged.
pub const DEFAULT_PIXEL_CHECK: u8 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub id: u32,
    pub rect: PixelRect,
}

/// The regions detected on one image.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionAnnotation {
    pub regions: Vec<Region>,
}

impl RegionAnnotation {
    pub fn new(regions: Vec<Region>) -> Self {
        Self { regions }
    }

    /// Every box must be non-empty and lie inside a `width × height` image.
    pub fn validate(&self, width: u32, height: u32) -> Result<()> {
        for r in &self.regions {
            if r.rect.area() == 0 {
                return Err(Error::DegenerateBox);
            }
            if r.rect.x1 > width || r.rect.y1 > height {
                return Err(Error::InvalidConfig(format!(
                    "region {} {:?} exceeds {width}x{height}",
                    r.id, r.rect
                )));
            }
        }
        Ok(())
    }
}

/// Intersection area over union area.
pub fn iou(a: &PixelRect, b: &PixelRect) -> Result<f64> {
    let (area_a, area_b) = (a.area(), b.area());
    if area_a == 0 || area_b == 0 {
        return Err(Error::DegenerateBox);
    }
    let inter = a.intersection(b).map_or(0, |r| r.area());
    Ok(inter as f64 / (area_a + area_b - inter) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionMatch {
    pub prev_id: u32,
    pub cur_id: u32,
    pub prev: PixelRect,
    pub cur: PixelRect,
    pub iou: f64,
}

/// Greedy one-to-one matching in descending IoU order. Pairs below `iou_threshold`
/// are never matched; ties break toward earlier regions in `prev`, then `cur`.
/// Degenerate boxes are skipped.
pub fn match_regions(
    prev: &RegionAnnotation,
    cur: &RegionAnnotation,
    iou_threshold: f64,
) -> Vec<RegionMatch> {
    let mut candidates = Vec::new();
    for (i, p) in prev.regions.iter().enumerate() {
        for (j, c) in cur.regions.iter().enumerate() {
            if let Ok(v) = iou(&p.rect, &c.rect) {
                if v >= iou_threshold && v > 0.0 {
                    candidates.push((v, i, j));
                }
            }
        }
    }
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut prev_used = vec![false; prev.regions.len()];
    let mut cur_used = vec![false; cur.regions.len()];
    let mut out = Vec::new();
    for (v, i, j) in candidates {
        if prev_used[i] || cur_used[j] {
            continue;
        }
        prev_used[i] = true;
        cur_used[j] = true;
        let (p, c) = (prev.regions[i], cur.regions[j]);
        out.push(RegionMatch {
            prev_id: p.id,
            cur_id: c.id,
            prev: p.rect,
            cur: c.rect,
            iou: v,
        });
    }
    out
}

/// Labels each patch of `cur` as redundant (`true`) or changed.
///
/// A patch is redundant iff its footprint lies inside both boxes of some match
/// with IoU `>= iou_threshold`, and every sample differs from `prev` by at most
/// `pixel_check`.
pub fn generate_labels(
    prev: &PatchGrid,
    cur: &PatchGrid,
    matches: &[RegionMatch],
    iou_threshold: f64,
    pixel_check: u8,
) -> Result<Vec<bool>> {
    if !grids_compatible(prev, cur) || prev.channels() != cur.channels() {
        return Err(Error::GridMismatch);
    }
    let stable: Vec<PixelRect> = matches
        .iter()
        .filter(|m| m.iou >= iou_threshold)
        .filter_map(|m| m.prev.intersection(&m.cur))
        .collect();
    Ok((0..cur.len())
        .map(|j| {
            let foot = cur.patch_rect(j);
            stable.iter().any(|r| r.contains_rect(&foot))
                && prev
                    .patch(j)
                    .iter()
                    .zip(cur.patch(j))
                    .all(|(&a, &b)| a.abs_diff(b) <= pixel_check)
        })
        .collect())
}

/// Annotations for several images, keyed by image id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AnnotationSet {
    pub images: BTreeMap<String, RegionAnnotation>,
}

impl AnnotationSet {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut images: BTreeMap<String, RegionAnnotation> = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                message: format!("line {}: {message}", lineno + 1),
            };
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 6 {
                return Err(err(format!("expected 6 fields, found {}", fields.len())));
            }
            let mut nums = [0u32; 5];
            for (n, f) in nums.iter_mut().zip(&fields[1..]) {
                *n = f.parse().map_err(|_| err(format!("bad integer {f:?}")))?;
            }
            let [id, x0, y0, x1, y1] = nums;
            if x1 <= x0 || y1 <= y0 {
                return Err(err("box has zero area".into()));
            }
            images.entry(fields[0].to_string()).or_default().regions.push(Region {
                id,
                rect: PixelRect::new(x0, y0, x1, y1),
            });
        }
        Ok(Self { images })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&std::fs::read_to_string(path)?, path)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (image, ann) in &self.images {
            for r in &ann.regions {
                let b = r.rect;
                let _ = writeln!(s, "{image} {} {} {} {} {}", r.id, b.x0, b.y0, b.x1, b.y1);
            }
        }
        s
    }

    pub fn get(&self, image_id: &str) -> Option<&RegionAnnotation> {
        self.images.get(image_id)
    }
}
