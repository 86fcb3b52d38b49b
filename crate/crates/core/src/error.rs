use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("image has zero width or height")]
    EmptyImage,
    #[error("raster data length {actual} does not match {width}x{height}x{channels}")]
    RasterSize {
        width: u32,
        height: u32,
        channels: u32,
        actual: usize,
    },
    #[error("unsupported channel count {0} (expected 1 or 3)")]
    Channels(u32),
    #[error("{width}x{height} image is not divisible by patch size {patch_size}")]
    DimensionMismatch {
        width: u32,
        height: u32,
        patch_size: u32,
    },
    #[error("invalid patch size {0}")]
    PatchSize(u32),
    #[error("patch index {index} out of range for {len} patches")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("patch grids are not compatible")]
    GridMismatch,
    #[error("feature kind is not computable from pixels")]
    UnsupportedKind,
    #[error("expected {expected} patches, found {actual}")]
    PatchCountMismatch { expected: usize, actual: usize },
    #[error("non-finite value at component {0}")]
    NonFiniteValue(usize),
    #[error("corrupt file: {0}")]
    CorruptFile(String),
    #[error("zero-norm feature vector")]
    ZeroNorm,
    #[error("feature shapes differ: {0}")]
    ShapeMismatch(String),
    #[error("model expects input dim {expected}, got {actual}")]
    ModelDimMismatch { expected: usize, actual: usize },
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("degenerate box with zero area")]
    DegenerateBox,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("step {step} out of range 1..={len}")]
    StepOutOfRange { step: usize, len: usize },
    #[error("rts selector requires a model")]
    MissingModel,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
