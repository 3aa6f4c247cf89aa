//! Voxel grid data model shared by every other module.
//!
//! Voxels are stored x-fastest (the NIfTI on-disk order): the linear index of
//! `(x, y, z)` is `x + nx * (y + ny * z)`. An axial slice is a fixed `z`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Label values of the merged ground-truth encoding.
pub struct LabelScheme;

impl LabelScheme {
    pub const BACKGROUND: u32 = 0;
    pub const BODY: u32 = 1;
    pub const LESION: u32 = 2;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VoxelKind {
    /// Real-valued CT intensities in HU.
    Intensity,
    /// Non-negative integer labels.
    Label,
}

impl VoxelKind {
    pub fn name(self) -> &'static str {
        match self {
            VoxelKind::Intensity => "intensity",
            VoxelKind::Label => "label",
        }
    }
}

/// Label storage, kept at the narrowest width that holds the largest value.
///
/// A 512x512x400 mask is ~100 MB as `u8`; widening every mask to `u32` would
/// make batch evaluation memory-bound.
#[derive(Debug, Clone)]
pub enum LabelData {
    U8(Vec<u8>),
    U16(Vec<u16>),
    U32(Vec<u32>),
}

impl LabelData {
    /// Narrow a vector of label values to the smallest sufficient width.
    pub fn from_values(values: Vec<u32>) -> Self {
        let max = values.iter().copied().max().unwrap_or(0);
        if max <= u8::MAX as u32 {
            LabelData::U8(values.into_iter().map(|v| v as u8).collect())
        } else if max <= u16::MAX as u32 {
            LabelData::U16(values.into_iter().map(|v| v as u16).collect())
        } else {
            LabelData::U32(values)
        }
    }

    pub fn zeros(len: usize) -> Self {
        LabelData::U8(vec![0; len])
    }

    pub fn len(&self) -> usize {
        match self {
            LabelData::U8(v) => v.len(),
            LabelData::U16(v) => v.len(),
            LabelData::U32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn get(&self, index: usize) -> u32 {
        match self {
            LabelData::U8(v) => v[index] as u32,
            LabelData::U16(v) => v[index] as u32,
            LabelData::U32(v) => v[index],
        }
    }

    pub fn iter(&self) -> Box<dyn Iterator<Item = u32> + '_> {
        match self {
            LabelData::U8(v) => Box::new(v.iter().map(|&x| x as u32)),
            LabelData::U16(v) => Box::new(v.iter().map(|&x| x as u32)),
            LabelData::U32(v) => Box::new(v.iter().copied()),
        }
    }

    pub fn max(&self) -> u32 {
        match self {
            LabelData::U8(v) => v.iter().copied().max().unwrap_or(0) as u32,
            LabelData::U16(v) => v.iter().copied().max().unwrap_or(0) as u32,
            LabelData::U32(v) => v.iter().copied().max().unwrap_or(0),
        }
    }

    /// Number of voxels carrying `label`.
    pub fn count(&self, label: u32) -> usize {
        match self {
            LabelData::U8(v) => {
                if label > u8::MAX as u32 {
                    0
                } else {
                    v.iter().filter(|&&x| x as u32 == label).count()
                }
            }
            LabelData::U16(v) => v.iter().filter(|&&x| x as u32 == label).count(),
            LabelData::U32(v) => v.iter().filter(|&&x| x == label).count(),
        }
    }

    pub fn to_vec(&self) -> Vec<u32> {
        self.iter().collect()
    }
}

impl PartialEq for LabelData {
    fn eq(&self, other: &Self) -> bool {
        self.len() == other.len() && self.iter().eq(other.iter())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum VoxelData {
    Intensity(Vec<f32>),
    Label(LabelData),
}

impl VoxelData {
    pub fn len(&self) -> usize {
        match self {
            VoxelData::Intensity(v) => v.len(),
            VoxelData::Label(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind(&self) -> VoxelKind {
        match self {
            VoxelData::Intensity(_) => VoxelKind::Intensity,
            VoxelData::Label(_) => VoxelKind::Label,
        }
    }
}

/// A 3D scalar lattice with physical spacing in mm.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    dims: [usize; 3],
    spacing: [f64; 3],
    data: VoxelData,
}

impl VoxelGrid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], data: VoxelData) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::InvalidGrid(format!("dimensions must be positive, got {dims:?}")));
        }
        if spacing.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(Error::InvalidGrid(format!(
                "spacing must be finite and positive, got {spacing:?}"
            )));
        }
        let expected = dims[0]
            .checked_mul(dims[1])
            .and_then(|v| v.checked_mul(dims[2]))
            .ok_or_else(|| Error::InvalidGrid(format!("dimensions {dims:?} overflow")))?;
        if data.len() != expected {
            return Err(Error::InvalidGrid(format!(
                "data holds {} voxels, dims {:?} require {}",
                data.len(),
                dims,
                expected
            )));
        }
        Ok(VoxelGrid { dims, spacing, data })
    }

    pub fn intensity(dims: [usize; 3], spacing: [f64; 3], values: Vec<f32>) -> Result<Self> {
        Self::new(dims, spacing, VoxelData::Intensity(values))
    }

    pub fn label(dims: [usize; 3], spacing: [f64; 3], values: LabelData) -> Result<Self> {
        Self::new(dims, spacing, VoxelData::Label(values))
    }

    /// An all-background label grid.
    pub fn empty_label(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        let n = dims.iter().product();
        Self::label(dims, spacing, LabelData::zeros(n))
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn kind(&self) -> VoxelKind {
        self.data.kind()
    }

    pub fn data(&self) -> &VoxelData {
        &self.data
    }

    pub fn into_data(self) -> VoxelData {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Physical volume of one voxel in mm³.
    pub fn voxel_volume_mm3(&self) -> f64 {
        self.spacing.iter().product()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let [nx, ny, _] = self.dims;
        [index % nx, (index / nx) % ny, index / (nx * ny)]
    }

    pub fn labels(&self) -> Option<&LabelData> {
        match &self.data {
            VoxelData::Label(l) => Some(l),
            VoxelData::Intensity(_) => None,
        }
    }

    pub fn intensities(&self) -> Option<&[f32]> {
        match &self.data {
            VoxelData::Intensity(v) => Some(v),
            VoxelData::Label(_) => None,
        }
    }

    pub fn require_labels(&self) -> Result<&LabelData> {
        self.labels().ok_or(Error::KindMismatch {
            expected: "label",
            actual: "intensity",
        })
    }

    pub fn require_intensities(&self) -> Result<&[f32]> {
        self.intensities().ok_or(Error::KindMismatch {
            expected: "intensity",
            actual: "label",
        })
    }

    pub fn same_dims(&self, other: &VoxelGrid) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::DimsMismatch(self.dims, other.dims));
        }
        Ok(())
    }
}

/// Inclusive, 0-based 3D box in voxel index space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VoxelBox {
    pub x_min: usize,
    pub y_min: usize,
    pub z_min: usize,
    pub x_max: usize,
    pub y_max: usize,
    pub z_max: usize,
}

impl VoxelBox {
    pub fn point(p: [usize; 3]) -> Self {
        VoxelBox {
            x_min: p[0],
            y_min: p[1],
            z_min: p[2],
            x_max: p[0],
            y_max: p[1],
            z_max: p[2],
        }
    }

    pub fn extents(&self) -> [usize; 3] {
        [
            self.x_max - self.x_min + 1,
            self.y_max - self.y_min + 1,
            self.z_max - self.z_min + 1,
        ]
    }

    pub fn voxel_count(&self) -> usize {
        self.extents().iter().product()
    }

    pub fn contains(&self, p: [usize; 3]) -> bool {
        (self.x_min..=self.x_max).contains(&p[0])
            && (self.y_min..=self.y_max).contains(&p[1])
            && (self.z_min..=self.z_max).contains(&p[2])
    }

    pub fn contains_point(&self, p: [f64; 3]) -> bool {
        p[0] >= self.x_min as f64
            && p[0] <= self.x_max as f64
            && p[1] >= self.y_min as f64
            && p[1] <= self.y_max as f64
            && p[2] >= self.z_min as f64
            && p[2] <= self.z_max as f64
    }

    pub fn intersects(&self, other: &VoxelBox) -> bool {
        self.x_min <= other.x_max
            && other.x_min <= self.x_max
            && self.y_min <= other.y_max
            && other.y_min <= self.y_max
            && self.z_min <= other.z_max
            && other.z_min <= self.z_max
    }

    pub fn expand_to(&mut self, p: [usize; 3]) {
        self.x_min = self.x_min.min(p[0]);
        self.y_min = self.y_min.min(p[1]);
        self.z_min = self.z_min.min(p[2]);
        self.x_max = self.x_max.max(p[0]);
        self.y_max = self.y_max.max(p[1]);
        self.z_max = self.z_max.max(p[2]);
    }

    pub fn fits_in(&self, dims: [usize; 3]) -> bool {
        self.x_max < dims[0] && self.y_max < dims[1] && self.z_max < dims[2]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_length_mismatch() {
        let err = VoxelGrid::intensity([2, 2, 2], [1.0; 3], vec![0.0; 7]).unwrap_err();
        assert!(matches!(err, Error::InvalidGrid(_)));
    }

    #[test]
    fn rejects_bad_spacing() {
        for bad in [0.0, -1.0, f64::NAN, f64::INFINITY] {
            assert!(VoxelGrid::intensity([1, 1, 1], [1.0, bad, 1.0], vec![0.0]).is_err());
        }
    }

    #[test]
    fn index_and_coords_are_inverse() {
        let g = VoxelGrid::empty_label([3, 4, 5], [1.0; 3]).unwrap();
        for i in 0..g.len() {
            let [x, y, z] = g.coords(i);
            assert_eq!(g.index(x, y, z), i);
        }
        assert_eq!(g.index(1, 0, 0), 1);
        assert_eq!(g.index(0, 1, 0), 3);
        assert_eq!(g.index(0, 0, 1), 12);
    }

    #[test]
    fn label_data_narrows_and_compares_by_value() {
        assert!(matches!(LabelData::from_values(vec![0, 255]), LabelData::U8(_)));
        assert!(matches!(LabelData::from_values(vec![0, 256]), LabelData::U16(_)));
        assert!(matches!(LabelData::from_values(vec![70_000]), LabelData::U32(_)));
        assert_eq!(LabelData::U8(vec![1, 2]), LabelData::U32(vec![1, 2]));
        assert_ne!(LabelData::U8(vec![1, 2]), LabelData::U32(vec![1, 3]));
        assert_eq!(LabelData::U8(vec![1, 2, 2]).count(2), 2);
        assert_eq!(LabelData::U8(vec![1, 2, 2]).count(300), 0);
    }

    #[test]
    fn label_scheme_values_are_distinct() {
        let v = [LabelScheme::BACKGROUND, LabelScheme::BODY, LabelScheme::LESION];
        assert_eq!(v, [0, 1, 2]);
    }

    #[test]
    fn box_arithmetic() {
        let b = VoxelBox {
            x_min: 10,
            y_min: 12,
            z_min: 76,
            x_max: 20,
            y_max: 22,
            z_max: 82,
        };
        assert_eq!(b.extents(), [11, 11, 7]);
        assert_eq!(b.voxel_count(), 847);
        assert!(b.contains([10, 22, 80]));
        assert!(!b.contains([9, 22, 80]));
    }
}
