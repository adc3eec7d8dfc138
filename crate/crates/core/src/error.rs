use std::path::PathBuf;

use crate::anatomy::{Branch, Structure};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot decode image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("malformed json in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("exam metadata has no pixel_spacing")]
    MissingSpacing,
    #[error("exam metadata has no {0}")]
    MissingField(&'static str),
    #[error("exam directory {0} contains no slice images")]
    MissingSlices(PathBuf),
    #[error("expected 10 keypoints, found {0}")]
    BadAnnotationCount(usize),
    #[error("structure {0:?} annotated more than once")]
    DuplicateStructure(Structure),
    #[error("{0:?} keypoints are not ordered top to bottom")]
    BadOrdering(Branch),
    #[error("keypoint {structure:?} at ({row}, {col}) lies outside a {height}x{width} slice")]
    OutOfBounds {
        structure: Structure,
        row: f64,
        col: f64,
        height: usize,
        width: usize,
    },
    #[error("invalid exam: {0}")]
    InvalidExam(String),
    #[error("slice count must be odd, got {0}")]
    EvenSliceCount(usize),
    #[error("requested {requested} slices but the exam has {available}")]
    TooFewSlices { requested: usize, available: usize },
    #[error("spacing must be positive, got {0}")]
    InvalidSpacing(f64),
    #[error("resampled extent {extent:.1} px exceeds twice the {canvas} px canvas")]
    ExtentTooLarge { extent: f64, canvas: usize },
    #[error("same-class keypoint disks overlap at pixel ({row}, {col}) in channel {channel}")]
    OverlapViolation {
        channel: usize,
        row: usize,
        col: usize,
    },
    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(expected: &[usize], found: &[usize]) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_vec(),
            found: found.to_vec(),
        }
    }
}
