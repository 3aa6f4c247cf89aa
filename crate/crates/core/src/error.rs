use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {cause}")]
    Io { path: PathBuf, cause: std::io::Error },

    #[error("gzip stream is corrupt: {0}")]
    Gzip(String),

    #[error("invalid NIfTI header: {0}")]
    Header(String),

    #[error("unsupported NIfTI datatype code {0} (expected 2, 4, 8 or 16)")]
    UnsupportedDatatype(i16),

    #[error("payload size mismatch: header declares {expected} bytes of voxel data but file holds {actual}")]
    PayloadSize { expected: usize, actual: usize },

    #[error("invalid voxel grid: {0}")]
    InvalidGrid(String),

    #[error("invalid label value {value} at voxel {index}: {reason}")]
    InvalidLabel {
        index: usize,
        value: f64,
        reason: &'static str,
    },

    #[error("label value {0} does not fit the NIfTI storage type")]
    LabelOutOfRange(u32),

    #[error("expected a {expected} volume, got {actual}")]
    KindMismatch {
        expected: &'static str,
        actual: &'static str,
    },

    #[error("dimension mismatch: {0:?} vs {1:?}")]
    DimsMismatch([usize; 3], [usize; 3]),

    #[error("slice {slice} out of range for a volume with {nz} slices")]
    SliceOutOfRange { slice: usize, nz: usize },

    #[error("annotation error: {0}")]
    Annotation(String),

    #[error("no foreground voxels above {0} HU")]
    EmptyForeground(f64),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("duplicate id: {0}")]
    Duplicate(String),

    #[error("invalid phantom: {0}")]
    Phantom(String),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("image encoding error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, cause: std::io::Error) -> Self {
        Error::Io { path: path.into(), cause }
    }
}
