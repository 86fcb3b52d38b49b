//! Redundancy token selection: a small MLP that decides whether a patch of the
//! current screenshot repeats the corresponding patch of the previous one, and
//! the region-overlap labeling used to supervise it.

mod model;
mod regions;
mod train;

pub use model::{sigmoid, RtsModel, DEFAULT_HIDDEN, MODEL_MAGIC};
pub use regions::{
    generate_labels, iou, match_regions, AnnotationSet, Region, RegionAnnotation, RegionMatch,
    DEFAULT_IOU_THRESHOLD, DEFAULT_PIXEL_CHECK,
};
pub use train::{
    evaluate, load_samples, objective, objective_and_gradient, read_samples, save_samples, train,
    write_samples, Metrics, Pairing, TrainConfig, TrainOutcome, TrainingSample, SAMPLES_MAGIC,
};

use crate::features::FeatureMap;
use crate::{Error, Result};

/// Pairs each patch's features with its labels.
pub fn samples_from_labels(
    prev: &FeatureMap,
    cur: &FeatureMap,
    labels: &[bool],
) -> Result<Vec<TrainingSample>> {
    if prev.n_patches() != cur.n_patches() || prev.dim() != cur.dim() || labels.len() != cur.n_patches() {
        return Err(Error::ShapeMismatch(format!(
            "{} prev, {} cur, {} labels",
            prev.n_patches(),
            cur.n_patches(),
            labels.len()
        )));
    }
    Ok(prev
        .iter()
        .zip(cur.iter())
        .zip(labels)
        .map(|((p, c), &l)| TrainingSample::new(p.to_vec(), c.to_vec(), l))
        .collect())
}
