//! Weak-supervision lesion detection toolkit: NIfTI volume I/O, box
//! annotations to slab ground truth, connected components, lesion-level
//! detection metrics and synthetic phantoms with known outcomes.

pub mod annotations;
pub mod batch;
pub mod error;
pub mod evaluation;
pub mod morphology;
pub mod nifti;
pub mod phantom;
pub mod render;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{LabelData, LabelScheme, VoxelBox, VoxelData, VoxelGrid, VoxelKind};
