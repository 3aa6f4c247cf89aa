//! 3D connected components, size filtering and size percentiles.
//!
//! Labeling is a two-pass raster scan with union-find over foreground runs:
//! each row `(y, z)` is reduced to maximal runs of foreground voxels, runs are
//! unioned with touching runs in the already-scanned neighbour rows, and a
//! second pass resolves roots into components. Work is proportional to the
//! number of voxels scanned plus the number of runs, so sparse 512x512x400
//! masks label in well under a second.

use std::cmp::Reverse;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{LabelData, VoxelBox, VoxelGrid};

/// Voxel neighbourhood used to decide connectivity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    /// Face neighbours only.
    Six,
    /// Faces, edges and corners.
    #[default]
    TwentySix,
}

impl TryFrom<u8> for Connectivity {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            6 => Ok(Connectivity::Six),
            26 => Ok(Connectivity::TwentySix),
            other => Err(format!("connectivity must be 6 or 26, got {other}")),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Six => 6,
            Connectivity::TwentySix => 26,
        }
    }
}

impl FromStr for Connectivity {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let v: u8 = s.trim().parse().map_err(|_| format!("connectivity must be 6 or 26, got {s:?}"))?;
        Connectivity::try_from(v)
    }
}

impl fmt::Display for Connectivity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", u8::from(*self))
    }
}

/// One connected region of a label mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub id: u32,
    pub voxel_count: u64,
    pub volume_mm3: f64,
    pub bbox: VoxelBox,
    pub centroid: [f64; 3],
    /// Linear voxel indices in ascending order. Not serialized.
    #[serde(skip)]
    pub voxels: Vec<usize>,
}

impl Component {
    /// Smallest linear index in the component.
    pub fn min_voxel(&self) -> Option<usize> {
        self.voxels.first().copied()
    }
}

/// Serialized component list for one scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentList {
    pub scan_id: String,
    pub components: Vec<Component>,
}

/// Minimum size a predicted component needs to be retained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeThreshold {
    MinVoxels(u64),
    MinVolumeMm3(f64),
}

impl SizeThreshold {
    pub const NONE: SizeThreshold = SizeThreshold::MinVoxels(0);

    pub fn voxels(min_voxels: u64) -> Self {
        SizeThreshold::MinVoxels(min_voxels)
    }

    /// Inclusive: a component exactly at the threshold is kept.
    pub fn keeps(&self, c: &Component) -> bool {
        match *self {
            SizeThreshold::MinVoxels(n) => c.voxel_count >= n,
            SizeThreshold::MinVolumeMm3(v) => c.volume_mm3 >= v,
        }
    }
}

impl Default for SizeThreshold {
    fn default() -> Self {
        SizeThreshold::NONE
    }
}

impl fmt::Display for SizeThreshold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SizeThreshold::MinVoxels(n) => write!(f, "{n}"),
            SizeThreshold::MinVolumeMm3(v) => write!(f, "{v} mm3"),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Run {
    x0: u32,
    x1: u32,
}

/// Foreground runs of every row, in raster order; row `r = y + ny * z`
/// owns `runs[row_start[r]..row_start[r + 1]]`.
struct RowRuns {
    runs: Vec<Run>,
    row_start: Vec<usize>,
}

fn slice_runs<T: Copy>(slice: &[T], nx: usize, ny: usize, is_fg: &(impl Fn(T) -> bool + Sync)) -> (Vec<Run>, Vec<u32>) {
    let mut runs = Vec::new();
    let mut per_row = vec![0u32; ny];
    for (y, row) in slice.chunks_exact(nx).enumerate() {
        let mut x = 0;
        while x < nx {
            if is_fg(row[x]) {
                let start = x;
                while x < nx && is_fg(row[x]) {
                    x += 1;
                }
                runs.push(Run {
                    x0: start as u32,
                    x1: (x - 1) as u32,
                });
                per_row[y] += 1;
            } else {
                x += 1;
            }
        }
    }
    (runs, per_row)
}

fn collect_runs<T: Copy + Sync>(data: &[T], dims: [usize; 3], is_fg: impl Fn(T) -> bool + Sync) -> RowRuns {
    let [nx, ny, _] = dims;
    let per_slice: Vec<(Vec<Run>, Vec<u32>)> = data
        .par_chunks(nx * ny)
        .map(|slice| slice_runs(slice, nx, ny, &is_fg))
        .collect();
    let total: usize = per_slice.iter().map(|(r, _)| r.len()).sum();
    let mut runs = Vec::with_capacity(total);
    let mut row_start = Vec::with_capacity(ny * dims[2] + 1);
    row_start.push(0);
    for (slice_runs, per_row) in per_slice {
        for count in per_row {
            let last = *row_start.last().unwrap();
            row_start.push(last + count as usize);
        }
        runs.extend(slice_runs);
    }
    RowRuns { runs, row_start }
}

struct DisjointSet {
    parent: Vec<u32>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        DisjointSet {
            parent: (0..n as u32).collect(),
        }
    }

    fn find(&mut self, mut i: u32) -> u32 {
        while self.parent[i as usize] != i {
            let grand = self.parent[self.parent[i as usize] as usize];
            self.parent[i as usize] = grand;
            i = grand;
        }
        i
    }

    /// The smaller index becomes the root, so roots are deterministic.
    fn union(&mut self, a: u32, b: u32) {
        let ra = self.find(a);
        let rb = self.find(b);
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi as usize] = lo;
        }
    }
}

fn union_rows(sets: &mut DisjointSet, runs: &[Run], cur: std::ops::Range<usize>, prev: std::ops::Range<usize>, dilate: u32) {
    let (mut i, mut j) = (cur.start, prev.start);
    while i < cur.end && j < prev.end {
        let a = runs[i];
        let b = runs[j];
        if a.x0 <= b.x1 + dilate && b.x0 <= a.x1 + dilate {
            sets.union(i as u32, j as u32);
        }
        if a.x1 < b.x1 {
            i += 1;
        } else {
            j += 1;
        }
    }
}

fn label_runs(rr: &RowRuns, dims: [usize; 3], connectivity: Connectivity) -> DisjointSet {
    let [_, ny, nz] = dims;
    let mut sets = DisjointSet::new(rr.runs.len());
    let row_range = |y: usize, z: usize| {
        let r = y + ny * z;
        rr.row_start[r]..rr.row_start[r + 1]
    };
    for z in 0..nz {
        for y in 0..ny {
            let cur = row_range(y, z);
            if cur.is_empty() {
                continue;
            }
            match connectivity {
                Connectivity::Six => {
                    if y > 0 {
                        union_rows(&mut sets, &rr.runs, cur.clone(), row_range(y - 1, z), 0);
                    }
                    if z > 0 {
                        union_rows(&mut sets, &rr.runs, cur.clone(), row_range(y, z - 1), 0);
                    }
                }
                Connectivity::TwentySix => {
                    if y > 0 {
                        union_rows(&mut sets, &rr.runs, cur.clone(), row_range(y - 1, z), 1);
                    }
                    if z > 0 {
                        let y_lo = y.saturating_sub(1);
                        let y_hi = (y + 1).min(ny - 1);
                        for yy in y_lo..=y_hi {
                            union_rows(&mut sets, &rr.runs, cur.clone(), row_range(yy, z - 1), 1);
                        }
                    }
                }
            }
        }
    }
    sets
}

struct Accum {
    count: u64,
    bbox: VoxelBox,
    sum: [u64; 3],
    voxels: Vec<usize>,
}

fn components_from<T: Copy + Sync>(
    data: &[T],
    grid: &VoxelGrid,
    connectivity: Connectivity,
    is_fg: impl Fn(T) -> bool + Sync,
) -> Vec<Component> {
    let dims = grid.dims();
    let [nx, ny, _] = dims;
    let rr = collect_runs(data, dims, is_fg);
    let mut sets = label_runs(&rr, dims, connectivity);

    let mut slot_of_root = vec![u32::MAX; rr.runs.len()];
    let mut accums: Vec<Accum> = Vec::new();
    for row in 0..rr.row_start.len() - 1 {
        let (y, z) = (row % ny, row / ny);
        for k in rr.row_start[row]..rr.row_start[row + 1] {
            let root = sets.find(k as u32) as usize;
            if slot_of_root[root] == u32::MAX {
                slot_of_root[root] = accums.len() as u32;
                let x0 = rr.runs[k].x0 as usize;
                accums.push(Accum {
                    count: 0,
                    bbox: VoxelBox::point([x0, y, z]),
                    sum: [0; 3],
                    voxels: Vec::new(),
                });
            }
            let acc = &mut accums[slot_of_root[root] as usize];
            let Run { x0, x1 } = rr.runs[k];
            let (x0, x1) = (x0 as usize, x1 as usize);
            let len = (x1 - x0 + 1) as u64;
            acc.count += len;
            acc.bbox.expand_to([x0, y, z]);
            acc.bbox.expand_to([x1, y, z]);
            acc.sum[0] += (x0 + x1) as u64 * len / 2;
            acc.sum[1] += y as u64 * len;
            acc.sum[2] += z as u64 * len;
            let base = nx * row;
            acc.voxels.extend(base + x0..=base + x1);
        }
    }

    // Slots were created in raster order of each component's first voxel,
    // so a stable sort by size gives the smallest-minimum-voxel tie-break.
    accums.sort_by_key(|a| Reverse(a.count));
    let voxel_volume = grid.voxel_volume_mm3();
    accums
        .into_iter()
        .enumerate()
        .map(|(i, a)| {
            let n = a.count as f64;
            Component {
                id: i as u32 + 1,
                voxel_count: a.count,
                volume_mm3: n * voxel_volume,
                bbox: a.bbox,
                centroid: [a.sum[0] as f64 / n, a.sum[1] as f64 / n, a.sum[2] as f64 / n],
                voxels: a.voxels,
            }
        })
        .collect()
}

/// Connected components of the voxels selected by `is_target`.
///
/// Ids run 1..=K in order of descending voxel count, ties broken by the
/// smaller minimum linear index.
pub fn connected_components_where(
    mask: &VoxelGrid,
    connectivity: Connectivity,
    is_target: impl Fn(u32) -> bool + Sync,
) -> Result<Vec<Component>> {
    Ok(match mask.require_labels()? {
        LabelData::U8(v) => components_from(v, mask, connectivity, |x| is_target(x as u32)),
        LabelData::U16(v) => components_from(v, mask, connectivity, |x| is_target(x as u32)),
        LabelData::U32(v) => components_from(v, mask, connectivity, &is_target),
    })
}

/// Connected components of the voxels equal to `target_label`.
pub fn connected_components(mask: &VoxelGrid, target_label: u32, connectivity: Connectivity) -> Result<Vec<Component>> {
    connected_components_where(mask, connectivity, |v| v == target_label)
}

/// Keep components that pass the threshold, preserving order.
pub fn filter_by_size(mut components: Vec<Component>, threshold: SizeThreshold) -> Vec<Component> {
    components.retain(|c| threshold.keeps(c));
    components
}

/// Nearest-rank percentile: the `ceil(p/100 * n)`-th smallest value, with
/// `p = 0` giving the minimum.
pub fn size_percentile(sizes: &[u64], p: f64) -> Result<u64> {
    if sizes.is_empty() {
        return Err(Error::Empty("size list"));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::InvalidGrid(format!("percentile {p} is outside [0, 100]")));
    }
    let mut sorted = sizes.to_vec();
    sorted.sort_unstable();
    let n = sorted.len();
    let exact = p * n as f64 / 100.0;
    // p * n is exact for integral p; the tolerance absorbs representation
    // error for fractional p so that e.g. 15% of 100 is rank 15, not 16.
    let rank = if (exact - exact.round()).abs() < 1e-9 {
        exact.round()
    } else {
        exact.ceil()
    } as usize;
    Ok(sorted[rank.clamp(1, n) - 1])
}
