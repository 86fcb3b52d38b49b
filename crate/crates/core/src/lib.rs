//! Redundancy-aware filtering of visual tokens across sequential GUI screenshots.
//!
//! The pipeline runs screenshot → [`raster::PatchGrid`] → [`features::FeatureMap`]
//! → [`selectors::RetentionMask`] → [`sequence::FilteredSequence`]. The learned
//! redundancy classifier lives in [`rts`], corpus statistics in [`analytics`], and
//! [`synthgen`] produces trajectories with exactly known change sets for testing.

pub mod analytics;
mod binio;
pub mod error;
pub mod features;
pub mod raster;
pub mod rts;
pub mod selectors;
pub mod sequence;
pub mod synthgen;

pub use error::{Error, Result};
