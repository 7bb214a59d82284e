use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        context: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("image dimensions {height}x{width} too small; both sides must be >= {min}")]
    FrameTooSmall {
        height: usize,
        width: usize,
        min: usize,
    },
    #[error("label out of range in '{stem}': found {value}, num_classes = {num_classes}")]
    LabelOutOfRange {
        stem: String,
        value: u8,
        num_classes: usize,
    },
    #[error("mask/image shape mismatch for '{stem}': image {image:?}, mask {mask:?}")]
    MaskShapeMismatch {
        stem: String,
        image: (usize, usize),
        mask: (usize, usize),
    },
    #[error("dataset at {path} contains no images")]
    EmptyDataset { path: PathBuf },
    #[error("split would leave the labeled pool empty (supervised loss undefined)")]
    EmptyLabeledPool,
    #[error("class {cls} out of range (num_classes = {num_classes})")]
    ClassOutOfRange { cls: usize, num_classes: usize },
    #[error("surface undefined: {which} mask is empty for class {cls}")]
    UndefinedSurface { which: &'static str, cls: usize },
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("negative loss weight: {name} = {value}")]
    NegativeWeight { name: &'static str, value: f64 },
    #[error("sharpening temperature must be > 0, got {0}")]
    NonPositiveTau(f64),
    #[error("non-finite {what} at iteration {iteration}")]
    NonFinite { what: &'static str, iteration: usize },
    #[error("checkpoint format error at {path}: {reason}")]
    CheckpointFormat { path: PathBuf, reason: String },
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image decode error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
