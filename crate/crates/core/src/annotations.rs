//! 2D box annotations and the weak 3D ground truth built from them.
//!
//! A box drawn on one axial slice is extended by a fixed number of slices on
//! each side to form a slab, and slabs are merged with a body-region mask
//! into a [`LabelScheme`] volume.

use std::collections::HashSet;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::morphology::{connected_components_where, Connectivity};
use crate::volume::{LabelData, LabelScheme, VoxelBox, VoxelGrid};

/// Canonical CSV header of an annotation file.
pub const CSV_HEADER: &str = "scan_id,lesion_id,slice_z,x_min,y_min,x_max,y_max";

/// Default HU threshold of the body fallback.
pub const DEFAULT_BODY_HU: f64 = -500.0;

/// One lesion box on one axial slice. Bounds are 0-based and inclusive.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoxAnnotation {
    pub scan_id: String,
    pub lesion_id: String,
    pub slice_z: usize,
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl BoxAnnotation {
    pub fn validate(&self) -> Result<()> {
        if self.x_min > self.x_max || self.y_min > self.y_max {
            return Err(Error::Annotation(format!(
                "{}/{}: inverted box x {}..{} y {}..{}",
                self.scan_id, self.lesion_id, self.x_min, self.x_max, self.y_min, self.y_max
            )));
        }
        if self.scan_id.is_empty() || self.lesion_id.is_empty() {
            return Err(Error::Annotation("scan_id and lesion_id must be non-empty".into()));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.x_max - self.x_min + 1
    }

    pub fn height(&self) -> usize {
        self.y_max - self.y_min + 1
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlabConfig {
    pub extent_each_side: usize,
}

impl Default for SlabConfig {
    fn default() -> Self {
        SlabConfig { extent_each_side: 3 }
    }
}

/// A box extended through neighbouring slices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slab {
    pub bounds: VoxelBox,
    /// True when the volume boundary cut the slab short.
    pub clamped: bool,
}

fn check_unique(records: &[BoxAnnotation]) -> Result<()> {
    let mut seen = HashSet::new();
    for r in records {
        r.validate()?;
        if !seen.insert((r.scan_id.as_str(), r.lesion_id.as_str())) {
            return Err(Error::Duplicate(format!("lesion {} in scan {}", r.lesion_id, r.scan_id)));
        }
    }
    Ok(())
}

/// Parse annotation CSV text. Lines starting with `#` are comments.
pub fn parse_annotations_csv(reader: impl Read) -> Result<Vec<BoxAnnotation>> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<BoxAnnotation>().enumerate() {
        let rec = row.map_err(|e| Error::Annotation(format!("malformed record {}: {e}", i + 1)))?;
        out.push(rec);
    }
    check_unique(&out)?;
    Ok(out)
}

/// Load annotations from CSV, or from a JSON array when the file ends in `.json`.
pub fn load_annotations(path: impl AsRef<Path>) -> Result<Vec<BoxAnnotation>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    if is_json {
        let records: Vec<BoxAnnotation> = serde_json::from_reader(std::io::BufReader::new(file))?;
        check_unique(&records)?;
        Ok(records)
    } else {
        parse_annotations_csv(std::io::BufReader::new(file))
    }
}

pub fn write_annotations(path: impl AsRef<Path>, records: &[BoxAnnotation]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Annotation(format!("{other:?}")),
    })?;
    if records.is_empty() {
        w.write_record(CSV_HEADER.split(','))?;
    }
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Extend a box to `extent_each_side` slices above and below its slice,
/// clamped to `[0, nz - 1]`.
pub fn extend_to_slab(ann: &BoxAnnotation, cfg: SlabConfig, dims: [usize; 3]) -> Result<Slab> {
    ann.validate()?;
    let [nx, ny, nz] = dims;
    if ann.slice_z >= nz {
        return Err(Error::Annotation(format!(
            "{}/{}: slice {} out of range for {nz} slices",
            ann.scan_id, ann.lesion_id, ann.slice_z
        )));
    }
    if ann.x_max >= nx || ann.y_max >= ny {
        return Err(Error::Annotation(format!(
            "{}/{}: box x..{} y..{} exceeds in-plane size {nx}x{ny}",
            ann.scan_id, ann.lesion_id, ann.x_max, ann.y_max
        )));
    }
    let e = cfg.extent_each_side;
    let z_min = ann.slice_z.saturating_sub(e);
    let z_max = ann.slice_z.saturating_add(e).min(nz - 1);
    let clamped = ann.slice_z < e || ann.slice_z + e > nz - 1;
    Ok(Slab {
        bounds: VoxelBox {
            x_min: ann.x_min,
            y_min: ann.y_min,
            z_min,
            x_max: ann.x_max,
            y_max: ann.y_max,
            z_max,
        },
        clamped,
    })
}

/// Merged ground truth for one scan: lesion inside any slab, else body where
/// the body mask is nonzero, else background.
pub fn rasterize_ground_truth(
    annotations: &[BoxAnnotation],
    body: Option<&VoxelGrid>,
    dims: [usize; 3],
    spacing: [f64; 3],
    cfg: SlabConfig,
) -> Result<VoxelGrid> {
    if let Some(first) = annotations.first() {
        if let Some(other) = annotations.iter().find(|a| a.scan_id != first.scan_id) {
            return Err(Error::Annotation(format!(
                "annotations mix scans {} and {}",
                first.scan_id, other.scan_id
            )));
        }
    }
    let n: usize = dims.iter().product();
    let mut out = match body {
        Some(b) => {
            if b.dims() != dims {
                return Err(Error::DimsMismatch(dims, b.dims()));
            }
            let labels = b.require_labels()?;
            labels.iter().map(|v| (v != 0) as u8 * LabelScheme::BODY as u8).collect()
        }
        None => vec![LabelScheme::BACKGROUND as u8; n],
    };
    let [nx, ny, _] = dims;
    for ann in annotations {
        let b = extend_to_slab(ann, cfg, dims)?.bounds;
        for z in b.z_min..=b.z_max {
            for y in b.y_min..=b.y_max {
                let row = nx * (y + ny * z);
                out[row + b.x_min..=row + b.x_max].fill(LabelScheme::LESION as u8);
            }
        }
    }
    VoxelGrid::label(dims, spacing, LabelData::U8(out))
}

/// Body mask from CT by thresholding: voxels above `hu_threshold`, largest
/// 26-connected component, holes filled slice by slice. Labels are {0, 1}.
pub fn extract_body_fallback(ct: &VoxelGrid, hu_threshold: f64) -> Result<VoxelGrid> {
    let hu = ct.require_intensities()?;
    let dims = ct.dims();
    let fg: Vec<u8> = hu.iter().map(|&v| (v as f64 > hu_threshold) as u8).collect();
    let fg_grid = VoxelGrid::label(dims, ct.spacing(), LabelData::U8(fg))?;
    let comps = connected_components_where(&fg_grid, Connectivity::TwentySix, |v| v == 1)?;
    let largest = comps.first().ok_or(Error::EmptyForeground(hu_threshold))?;
    let mut mask = vec![0u8; ct.len()];
    for &i in &largest.voxels {
        mask[i] = 1;
    }
    let [nx, ny, nz] = dims;
    for z in 0..nz {
        fill_slice_holes(&mut mask[nx * ny * z..nx * ny * (z + 1)], nx, ny);
    }
    VoxelGrid::label(dims, ct.spacing(), LabelData::U8(mask))
}

/// Background not 4-connected to the slice border becomes foreground.
fn fill_slice_holes(slice: &mut [u8], nx: usize, ny: usize) {
    let mut outside = vec![false; slice.len()];
    let mut stack = Vec::new();
    for x in 0..nx {
        stack.push(x);
        stack.push(x + nx * (ny - 1));
    }
    for y in 0..ny {
        stack.push(nx * y);
        stack.push(nx - 1 + nx * y);
    }
    while let Some(i) = stack.pop() {
        if outside[i] || slice[i] != 0 {
            continue;
        }
        outside[i] = true;
        let (x, y) = (i % nx, i / nx);
        if x > 0 {
            stack.push(i - 1);
        }
        if x + 1 < nx {
            stack.push(i + 1);
        }
        if y > 0 {
            stack.push(i - nx);
        }
        if y + 1 < ny {
            stack.push(i + nx);
        }
    }
    for (v, out) in slice.iter_mut().zip(outside) {
        if !out {
            *v = 1;
        }
    }
}
