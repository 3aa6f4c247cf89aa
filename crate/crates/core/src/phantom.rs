//! Synthetic CT phantoms with analytically known detection outcomes.
//!
//! A phantom is a body region in air containing ellipsoidal lesions. From it
//! we derive 2D box annotations (one per lesion, on the lesion's central
//! slice), the exact lesion mask, and perturbed "prediction" masks whose
//! TP/FP/FN triple at any size threshold is known in closed form.
//!
//! # Random numbers
//!
//! All randomness comes from SplitMix64 (Steele, Lea & Flood 2014) used as
//! a counter-based generator: output `k` (k >= 1) of stream `s` is
//! `mix(s + k * 0x9E3779B97F4A7C15)` with the standard SplitMix64 finalizer.
//! Voxel `i` of the CT noise field takes outputs `2i + 1` and `2i + 2` of the
//! stream `mix(seed ^ NOISE_STREAM)` and applies Box–Muller (cosine branch)
//! with `u1 = ((a >> 11) + 1) / 2^53` and `u2 = (b >> 11) / 2^53`. The
//! result is truncated to [-1024, 3071] HU. Any implementation of this
//! recipe reproduces the same phantoms.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotations::BoxAnnotation;
use crate::error::{Error, Result};
use crate::evaluation::DetectionCounts;
use crate::morphology::SizeThreshold;
use crate::volume::{LabelData, LabelScheme, VoxelGrid};

pub const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;
/// Domain separator of the noise stream ("NOISE").
pub const NOISE_STREAM: u64 = 0x004E_4F49_5345;
pub const HU_MIN: f64 = -1024.0;
pub const HU_MAX: f64 = 3071.0;

/// SplitMix64 output finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Output `k` of the SplitMix64 stream seeded with `seed`.
pub fn splitmix64_at(seed: u64, k: u64) -> u64 {
    mix64(seed.wrapping_add(k.wrapping_mul(GOLDEN_GAMMA)))
}

/// Sequential view of the counter-based stream.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    seed: u64,
    counter: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { seed, counter: 0 }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter += 1;
        splitmix64_at(self.seed, self.counter)
    }

    /// Uniform in [0, 1).
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `lo..=hi`.
    pub fn int_in(&mut self, lo: i64, hi: i64) -> i64 {
        if hi <= lo {
            return lo;
        }
        let span = (hi - lo + 1) as u64;
        lo + (self.next_u64() % span) as i64
    }

    pub fn chance(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }
}

/// Standard normal deviate for voxel `index` of the noise field.
pub fn noise_at(seed: u64, index: u64) -> f64 {
    let stream = mix64(seed ^ NOISE_STREAM);
    let a = splitmix64_at(stream, 2 * index + 1);
    let b = splitmix64_at(stream, 2 * index + 2);
    let u1 = ((a >> 11) + 1) as f64 / (1u64 << 53) as f64;
    let u2 = (b >> 11) as f64 / (1u64 << 53) as f64;
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum BodyShape {
    /// Inclusive voxel bounds.
    Cuboid { min: [usize; 3], max: [usize; 3] },
    /// Center and radii in voxel units.
    Ellipsoid { center: [f64; 3], radii: [f64; 3] },
}

impl BodyShape {
    pub fn contains(&self, p: [usize; 3]) -> bool {
        match self {
            BodyShape::Cuboid { min, max } => (0..3).all(|a| p[a] >= min[a] && p[a] <= max[a]),
            BodyShape::Ellipsoid { center, radii } => {
                (0..3)
                    .map(|a| ((p[a] as f64 - center[a]) / radii[a]).powi(2))
                    .sum::<f64>()
                    <= 1.0
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionSpec {
    pub center: [usize; 3],
    /// Semi-axes in voxel units.
    pub radii: [f64; 3],
    #[serde(default = "default_lesion_hu")]
    pub hu: f64,
}

fn default_lesion_hu() -> f64 {
    120.0
}

fn default_body_hu() -> f64 {
    40.0
}

fn default_air_hu() -> f64 {
    -1000.0
}

fn default_scan_id() -> String {
    "phantom".to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    #[serde(default = "default_scan_id")]
    pub scan_id: String,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub body: BodyShape,
    #[serde(default = "default_body_hu")]
    pub body_hu: f64,
    #[serde(default = "default_air_hu")]
    pub air_hu: f64,
    pub lesions: Vec<LesionSpec>,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub seed: u64,
}

/// Voxels `p` of the volume with `sum(((p - c) / r)^2) <= 1`, ascending.
pub fn ellipsoid_voxels(dims: [usize; 3], center: [f64; 3], radii: [f64; 3]) -> Vec<usize> {
    let lo = |a: usize| (center[a] - radii[a]).ceil().max(0.0) as usize;
    let hi = |a: usize| ((center[a] + radii[a]).floor()).min(dims[a] as f64 - 1.0);
    let mut out = Vec::new();
    if (0..3).any(|a| hi(a) < 0.0) {
        return out;
    }
    let (hx, hy, hz) = (hi(0) as usize, hi(1) as usize, hi(2) as usize);
    for z in lo(2)..=hz {
        let dz = ((z as f64 - center[2]) / radii[2]).powi(2);
        for y in lo(1)..=hy {
            let dy = ((y as f64 - center[1]) / radii[1]).powi(2);
            for x in lo(0)..=hx {
                let dx = ((x as f64 - center[0]) / radii[0]).powi(2);
                if dx + dy + dz <= 1.0 {
                    out.push(x + dims[0] * (y + dims[1] * z));
                }
            }
        }
    }
    out
}

fn coords(dims: [usize; 3], i: usize) -> [usize; 3] {
    [i % dims[0], (i / dims[0]) % dims[1], i / (dims[0] * dims[1])]
}

/// Indices of the 26-neighbourhood of `i` (excluding `i`) inside the volume.
fn neighbours26(dims: [usize; 3], i: usize) -> impl Iterator<Item = usize> {
    let p = coords(dims, i);
    (0..27).filter(|&k| k != 13).filter_map(move |k| {
        let d = [k % 3, (k / 3) % 3, k / 9];
        let mut q = [0usize; 3];
        for a in 0..3 {
            let v = p[a] as i64 + d[a] as i64 - 1;
            if v < 0 || v >= dims[a] as i64 {
                return None;
            }
            q[a] = v as usize;
        }
        Some(q[0] + dims[0] * (q[1] + dims[1] * q[2]))
    })
}

/// Occupancy map of labelled voxel sets used to reject overlaps and contacts.
struct Occupancy {
    dims: [usize; 3],
    owner: Vec<u32>,
}

impl Occupancy {
    fn new(dims: [usize; 3]) -> Self {
        Occupancy {
            dims,
            owner: vec![0; dims.iter().product()],
        }
    }

    /// First other owner that overlaps or 26-touches `voxels`.
    fn conflict(&self, voxels: &[usize], touching: bool) -> Option<u32> {
        for &v in voxels {
            if self.owner[v] != 0 {
                return Some(self.owner[v]);
            }
            if touching {
                if let Some(o) = neighbours26(self.dims, v).map(|n| self.owner[n]).find(|&o| o != 0) {
                    return Some(o);
                }
            }
        }
        None
    }

    fn claim(&mut self, voxels: &[usize], owner: u32) {
        for &v in voxels {
            self.owner[v] = owner;
        }
    }
}

/// A generated phantom.
#[derive(Debug, Clone)]
pub struct Phantom {
    pub scan_id: String,
    pub ct: VoxelGrid,
    pub annotations: Vec<BoxAnnotation>,
    /// Exact lesions (label 2) over the body region (label 1).
    pub gt_lesion_mask: VoxelGrid,
    /// Body region as a {0, 1} mask.
    pub body_mask: VoxelGrid,
    /// Voxel set of each lesion, in spec order; lesion `k` has id `L{k+1}`.
    pub lesions: Vec<Vec<usize>>,
}

pub fn lesion_id(index: usize) -> String {
    format!("L{}", index + 1)
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::Phantom(format!("dims {:?} must be positive", self.dims)));
        }
        if self.spacing.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(Error::Phantom(format!("spacing {:?} must be positive", self.spacing)));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::Phantom(format!("noise_sigma {} must be >= 0", self.noise_sigma)));
        }
        if let BodyShape::Ellipsoid { radii, .. } = &self.body {
            if radii.iter().any(|r| !r.is_finite() || *r <= 0.0) {
                return Err(Error::Phantom("body radii must be positive".into()));
            }
        }
        for (k, l) in self.lesions.iter().enumerate() {
            if l.radii.iter().any(|r| !r.is_finite() || *r <= 0.0) {
                return Err(Error::Phantom(format!("lesion {} radii must be positive", lesion_id(k))));
            }
            if (0..3).any(|a| l.center[a] >= self.dims[a]) {
                return Err(Error::Phantom(format!("lesion {} center {:?} lies outside the volume", lesion_id(k), l.center)));
            }
            if !self.body.contains(l.center) {
                return Err(Error::Phantom(format!("lesion {} center {:?} lies outside the body", lesion_id(k), l.center)));
            }
        }
        Ok(())
    }
}

/// Build the CT volume, annotations and exact lesion mask of a phantom.
///
/// Lesions that overlap or touch (26-neighbourhood) are rejected, since
/// they would merge into one connected component.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let dims = spec.dims;
    let [nx, ny, _] = dims;
    let n: usize = dims.iter().product();

    let mut occupancy = Occupancy::new(dims);
    let mut lesions = Vec::with_capacity(spec.lesions.len());
    for (k, l) in spec.lesions.iter().enumerate() {
        let center = l.center.map(|c| c as f64);
        let voxels = ellipsoid_voxels(dims, center, l.radii);
        if let Some(other) = occupancy.conflict(&voxels, true) {
            return Err(Error::Phantom(format!(
                "lesions {} and {} overlap or touch",
                lesion_id(other as usize - 1),
                lesion_id(k)
            )));
        }
        occupancy.claim(&voxels, k as u32 + 1);
        lesions.push(voxels);
    }

    let mut base = vec![0u8; n];
    base.par_chunks_mut(nx * ny).enumerate().for_each(|(z, slice)| {
        for (j, v) in slice.iter_mut().enumerate() {
            if spec.body.contains([j % nx, j / nx, z]) {
                *v = LabelScheme::BODY as u8;
            }
        }
    });
    let body_mask = VoxelGrid::label(dims, spec.spacing, LabelData::U8(base.clone()))?;

    let hu_owner = occupancy.owner;
    let lesion_hu: Vec<f64> = spec.lesions.iter().map(|l| l.hu).collect();
    let mut mask = base;
    for voxels in &lesions {
        for &v in voxels {
            mask[v] = LabelScheme::LESION as u8;
        }
    }

    let mut ct = vec![0f32; n];
    ct.par_chunks_mut(nx * ny).enumerate().for_each(|(z, slice)| {
        let offset = z * nx * ny;
        for (j, out) in slice.iter_mut().enumerate() {
            let i = offset + j;
            let base_hu = match hu_owner[i] {
                0 if mask[i] == LabelScheme::BODY as u8 => spec.body_hu,
                0 => spec.air_hu,
                owner => lesion_hu[owner as usize - 1],
            };
            let value = if spec.noise_sigma > 0.0 {
                base_hu + spec.noise_sigma * noise_at(spec.seed, i as u64)
            } else {
                base_hu
            };
            *out = value.clamp(HU_MIN, HU_MAX) as f32;
        }
    });

    let annotations = spec
        .lesions
        .iter()
        .zip(&lesions)
        .enumerate()
        .map(|(k, (l, voxels))| {
            let cz = l.center[2];
            let (mut x_min, mut y_min, mut x_max, mut y_max) = (usize::MAX, usize::MAX, 0, 0);
            for p in voxels.iter().map(|&v| coords(dims, v)).filter(|p| p[2] == cz) {
                x_min = x_min.min(p[0]);
                y_min = y_min.min(p[1]);
                x_max = x_max.max(p[0]);
                y_max = y_max.max(p[1]);
            }
            BoxAnnotation {
                scan_id: spec.scan_id.clone(),
                lesion_id: lesion_id(k),
                slice_z: cz,
                x_min,
                y_min,
                x_max,
                y_max,
            }
        })
        .collect();

    Ok(Phantom {
        scan_id: spec.scan_id.clone(),
        ct: VoxelGrid::intensity(dims, spec.spacing, ct)?,
        annotations,
        gt_lesion_mask: VoxelGrid::label(dims, spec.spacing, LabelData::U8(mask))?,
        body_mask,
        lesions,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub center: [usize; 3],
    pub radii: [f64; 3],
}

fn default_pred_label() -> u32 {
    LabelScheme::LESION
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    /// Lesion ids (`L1`, `L2`, ...) left out of the prediction.
    #[serde(default)]
    pub drop_lesions: Vec<String>,
    #[serde(default)]
    pub spurious_blobs: Vec<BlobSpec>,
    /// Translation applied to every kept lesion.
    #[serde(default)]
    pub jitter_voxels: [i64; 3],
    #[serde(default = "default_pred_label")]
    pub lesion_label: u32,
}

impl Default for PerturbationSpec {
    fn default() -> Self {
        PerturbationSpec {
            drop_lesions: Vec::new(),
            spurious_blobs: Vec::new(),
            jitter_voxels: [0; 3],
            lesion_label: LabelScheme::LESION,
        }
    }
}

/// A perturbed prediction with everything needed for its expected counts.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub mask: VoxelGrid,
    pub n_gt: u64,
    pub n_dropped: u64,
    /// Voxel counts of kept (translated) lesions.
    pub kept_sizes: Vec<u64>,
    /// Voxel counts of spurious blobs.
    pub blob_sizes: Vec<u64>,
    pub voxel_volume_mm3: f64,
}

impl Prediction {
    fn passes(&self, size: u64, t: SizeThreshold) -> bool {
        match t {
            SizeThreshold::MinVoxels(n) => size >= n,
            SizeThreshold::MinVolumeMm3(v) => size as f64 * self.voxel_volume_mm3 >= v,
        }
    }

    /// Closed-form TP/FP/FN at a prediction size threshold: kept lesions
    /// that survive the threshold are TPs, the rest of the lesions are FNs,
    /// surviving spurious blobs are FPs.
    pub fn expected(&self, t: SizeThreshold) -> DetectionCounts {
        let tp = self.kept_sizes.iter().filter(|&&s| self.passes(s, t)).count() as u64;
        DetectionCounts {
            n_gt: self.n_gt,
            n_tp: tp,
            n_fp: self.blob_sizes.iter().filter(|&&s| self.passes(s, t)).count() as u64,
            n_fn: self.n_gt - tp,
        }
    }
}

/// Derive a prediction mask from a phantom: body copied as label 1, kept
/// lesions translated by the jitter, spurious blobs added.
///
/// Construction fails when a translated lesion loses contact with its
/// source or reaches another lesion, or when a blob overlaps any lesion or
/// touches another predicted object.
pub fn perturb_to_prediction(phantom: &Phantom, pspec: &PerturbationSpec) -> Result<Prediction> {
    let dims = phantom.gt_lesion_mask.dims();
    let label = pspec.lesion_label;
    if label == LabelScheme::BACKGROUND || label == LabelScheme::BODY || label > u8::MAX as u32 {
        return Err(Error::Phantom(format!("prediction lesion label {label} must be in 2..=255")));
    }
    let ids: Vec<String> = (0..phantom.lesions.len()).map(lesion_id).collect();
    for d in &pspec.drop_lesions {
        if !ids.contains(d) {
            return Err(Error::Phantom(format!("unknown lesion {d} in drop list")));
        }
    }

    let mut gt_owner = Occupancy::new(dims);
    for (k, v) in phantom.lesions.iter().enumerate() {
        gt_owner.claim(v, k as u32 + 1);
    }
    let mut pred_owner = Occupancy::new(dims);
    let mut out: Vec<u8> = phantom
        .body_mask
        .require_labels()?
        .iter()
        .map(|v| (v != 0) as u8 * LabelScheme::BODY as u8)
        .collect();

    let shift = pspec.jitter_voxels;
    let mut kept_sizes = Vec::new();
    for (k, voxels) in phantom.lesions.iter().enumerate() {
        if pspec.drop_lesions.contains(&ids[k]) {
            continue;
        }
        let moved: Vec<usize> = voxels
            .iter()
            .filter_map(|&v| {
                let p = coords(dims, v);
                let mut q = [0usize; 3];
                for a in 0..3 {
                    let t = p[a] as i64 + shift[a];
                    if t < 0 || t >= dims[a] as i64 {
                        return None;
                    }
                    q[a] = t as usize;
                }
                Some(q[0] + dims[0] * (q[1] + dims[1] * q[2]))
            })
            .collect();
        let own = k as u32 + 1;
        if !moved.iter().any(|&v| gt_owner.owner[v] == own) {
            return Err(Error::Phantom(format!("jitter {shift:?} moves {} off its ground truth", ids[k])));
        }
        if moved.iter().any(|&v| gt_owner.owner[v] != 0 && gt_owner.owner[v] != own) {
            return Err(Error::Phantom(format!("jitter {shift:?} moves {} onto another lesion", ids[k])));
        }
        if pred_owner.conflict(&moved, true).is_some() {
            return Err(Error::Phantom(format!("translated {} touches another prediction", ids[k])));
        }
        pred_owner.claim(&moved, own);
        for &v in &moved {
            out[v] = label as u8;
        }
        kept_sizes.push(moved.len() as u64);
    }

    let mut blob_sizes = Vec::new();
    for (b, blob) in pspec.spurious_blobs.iter().enumerate() {
        if blob.radii.iter().any(|r| !r.is_finite() || *r <= 0.0) || (0..3).any(|a| blob.center[a] >= dims[a]) {
            return Err(Error::Phantom(format!("spurious blob {} is invalid", b + 1)));
        }
        let voxels = ellipsoid_voxels(dims, blob.center.map(|c| c as f64), blob.radii);
        if gt_owner.conflict(&voxels, false).is_some() {
            return Err(Error::Phantom(format!("spurious blob {} overlaps a lesion", b + 1)));
        }
        if pred_owner.conflict(&voxels, true).is_some() {
            return Err(Error::Phantom(format!("spurious blob {} touches another prediction", b + 1)));
        }
        pred_owner.claim(&voxels, (phantom.lesions.len() + b + 1) as u32);
        for &v in &voxels {
            out[v] = label as u8;
        }
        blob_sizes.push(voxels.len() as u64);
    }

    let mask = VoxelGrid::label(dims, phantom.gt_lesion_mask.spacing(), LabelData::U8(out))?;
    Ok(Prediction {
        voxel_volume_mm3: mask.voxel_volume_mm3(),
        mask,
        n_gt: phantom.lesions.len() as u64,
        n_dropped: (phantom.lesions.len() - kept_sizes.len()) as u64,
        kept_sizes,
        blob_sizes,
    })
}

/// Parameters of the randomized scan generator. Ranges are inclusive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RandomSuiteParams {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub lesion_count: [usize; 2],
    pub lesion_radius: [f64; 2],
    pub lesion_hu: [f64; 2],
    pub drop_probability: f64,
    /// Blobs expected to survive a 250-voxel threshold.
    pub large_blob_count: [usize; 2],
    pub large_blob_radius: [f64; 2],
    /// Blobs expected to fall below a 250-voxel threshold.
    pub small_blob_count: [usize; 2],
    pub small_blob_radius: [f64; 2],
    pub max_jitter: i64,
    pub noise_sigma: f64,
}

impl Default for RandomSuiteParams {
    fn default() -> Self {
        RandomSuiteParams {
            dims: [64, 64, 40],
            spacing: [0.8, 0.8, 2.5],
            lesion_count: [1, 4],
            lesion_radius: [5.0, 7.0],
            lesion_hu: [80.0, 160.0],
            drop_probability: 0.25,
            large_blob_count: [0, 2],
            large_blob_radius: [4.5, 5.5],
            small_blob_count: [0, 3],
            small_blob_radius: [1.0, 3.0],
            max_jitter: 1,
            noise_sigma: 10.0,
        }
    }
}

fn center_distance(a: [usize; 3], b: [usize; 3]) -> f64 {
    (0..3).map(|k| (a[k] as f64 - b[k] as f64).powi(2)).sum::<f64>().sqrt()
}

/// Draw one (phantom, perturbation) pair. Objects are placed by rejection
/// sampling with centre separations that rule out contact even after jitter;
/// an object that cannot be placed in 200 attempts is skipped.
pub fn random_scan(params: &RandomSuiteParams, scan_id: &str, seed: u64) -> (PhantomSpec, PerturbationSpec) {
    let mut rng = SplitMix64::new(seed);
    let dims = params.dims;
    let body_center = dims.map(|d| (d as f64 - 1.0) / 2.0);
    let body_radii = dims.map(|d| d as f64 * 0.46);
    let body = BodyShape::Ellipsoid {
        center: body_center,
        radii: body_radii,
    };
    let jitter_room = 2.0 * (3.0f64).sqrt() * params.max_jitter as f64;

    let mut placed: Vec<([usize; 3], f64)> = Vec::new();
    let place = |rng: &mut SplitMix64, radius: f64, margin: f64, placed: &mut Vec<([usize; 3], f64)>| {
        for _ in 0..200 {
            let c = [0, 1, 2].map(|a| {
                let lo = (radius + 1.0).ceil() as i64;
                let hi = dims[a] as i64 - 1 - lo;
                rng.int_in(lo, hi.max(lo)) as usize
            });
            if !body.contains(c) {
                continue;
            }
            if placed.iter().all(|&(o, r)| center_distance(c, o) > r + radius + margin) {
                placed.push((c, radius));
                return Some(c);
            }
        }
        None
    };

    let n_lesions = rng.int_in(params.lesion_count[0] as i64, params.lesion_count[1] as i64) as usize;
    let mut lesions = Vec::new();
    for _ in 0..n_lesions {
        let radii = [0, 1, 2].map(|_| rng.uniform(params.lesion_radius[0], params.lesion_radius[1]));
        let bound = radii.iter().cloned().fold(0.0, f64::max);
        let hu = rng.uniform(params.lesion_hu[0], params.lesion_hu[1]).round();
        if let Some(center) = place(&mut rng, bound, 3.0 + jitter_room, &mut placed) {
            lesions.push(LesionSpec { center, radii, hu });
        }
    }
    let drop_lesions = (0..lesions.len()).filter(|_| rng.chance(params.drop_probability)).map(lesion_id).collect();

    let mut spurious_blobs = Vec::new();
    let n_large = rng.int_in(params.large_blob_count[0] as i64, params.large_blob_count[1] as i64);
    let n_small = rng.int_in(params.small_blob_count[0] as i64, params.small_blob_count[1] as i64);
    for (count, range) in [(n_large, params.large_blob_radius), (n_small, params.small_blob_radius)] {
        for _ in 0..count {
            let r = rng.uniform(range[0], range[1]);
            if let Some(center) = place(&mut rng, r, 3.0 + jitter_room, &mut placed) {
                spurious_blobs.push(BlobSpec { center, radii: [r; 3] });
            }
        }
    }
    let jitter_voxels = [0, 1, 2].map(|_| rng.int_in(-params.max_jitter, params.max_jitter));

    let phantom = PhantomSpec {
        scan_id: scan_id.to_string(),
        dims,
        spacing: params.spacing,
        body,
        body_hu: 40.0,
        air_hu: -1000.0,
        lesions,
        noise_sigma: params.noise_sigma,
        seed: rng.next_u64(),
    };
    let perturbation = PerturbationSpec {
        drop_lesions,
        spurious_blobs,
        jitter_voxels,
        lesion_label: LabelScheme::LESION,
    };
    (phantom, perturbation)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanTemplate {
    pub phantom: PhantomSpec,
    #[serde(default)]
    pub perturbation: PerturbationSpec,
}

fn default_expected_thresholds() -> Vec<u64> {
    vec![0, 250]
}

/// Suite description read by the `phantom` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SuiteSpec {
    /// Randomized scans drawn from `params`.
    Random {
        #[serde(default)]
        params: RandomSuiteParams,
        #[serde(default = "default_expected_thresholds")]
        thresholds: Vec<u64>,
    },
    /// Explicit scans. Generated as written unless a count is requested, in
    /// which case they are cycled and each copy gets a suite id and seed.
    Explicit {
        scans: Vec<ScanTemplate>,
        #[serde(default = "default_expected_thresholds")]
        thresholds: Vec<u64>,
    },
}

impl SuiteSpec {
    pub fn thresholds(&self) -> &[u64] {
        match self {
            SuiteSpec::Random { thresholds, .. } | SuiteSpec::Explicit { thresholds, .. } => thresholds,
        }
    }
}

pub fn suite_scan_id(index: usize) -> String {
    format!("phantom_{index:03}")
}

/// Scans generated for a random suite when no count is given.
pub const DEFAULT_SUITE_COUNT: usize = 10;

/// Scan templates of a suite. Scan `i` of a random or cycled suite is named
/// `phantom_{i:03}` and seeded with output `i + 1` of `seed`.
pub fn suite_templates(spec: &SuiteSpec, count: Option<usize>, seed: u64) -> Result<Vec<ScanTemplate>> {
    if count == Some(0) {
        return Err(Error::Phantom("suite count must be at least 1".into()));
    }
    let derived = |i: usize| (suite_scan_id(i), splitmix64_at(seed, i as u64 + 1));
    match spec {
        SuiteSpec::Random { params, .. } => Ok((0..count.unwrap_or(DEFAULT_SUITE_COUNT))
            .map(|i| {
                let (id, scan_seed) = derived(i);
                let (phantom, perturbation) = random_scan(params, &id, scan_seed);
                ScanTemplate { phantom, perturbation }
            })
            .collect()),
        SuiteSpec::Explicit { scans, .. } => {
            if scans.is_empty() {
                return Err(Error::Phantom("explicit suite has no scans".into()));
            }
            let Some(count) = count else {
                let mut ids = BTreeSet::new();
                for t in scans {
                    if !ids.insert(t.phantom.scan_id.as_str()) {
                        return Err(Error::Phantom(format!("duplicate scan_id {}", t.phantom.scan_id)));
                    }
                }
                return Ok(scans.clone());
            };
            Ok((0..count)
                .map(|i| {
                    let mut t = scans[i % scans.len()].clone();
                    (t.phantom.scan_id, t.phantom.seed) = derived(i);
                    t
                })
                .collect())
        }
    }
}

/// One generated scan of a suite.
pub struct SuiteScan {
    pub template: ScanTemplate,
    pub phantom: Phantom,
    pub prediction: Prediction,
}

pub fn build_scan(template: &ScanTemplate) -> Result<SuiteScan> {
    let phantom = generate_phantom(&template.phantom)?;
    let prediction = perturb_to_prediction(&phantom, &template.perturbation)?;
    Ok(SuiteScan {
        template: template.clone(),
        phantom,
        prediction,
    })
}

/// Expected counts of one scan, as written to `expected.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectedScan {
    pub scan_id: String,
    pub n_gt: u64,
    pub n_dropped: u64,
    pub kept_lesion_sizes: Vec<u64>,
    pub spurious_blob_sizes: Vec<u64>,
    /// Keyed by voxel threshold.
    pub expected: BTreeMap<u64, DetectionCounts>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectedSuite {
    pub seed: u64,
    pub scans: Vec<ExpectedScan>,
    pub totals: BTreeMap<u64, DetectionCounts>,
}

impl ExpectedScan {
    pub fn new(scan_id: &str, prediction: &Prediction, thresholds: &[u64]) -> Self {
        ExpectedScan {
            scan_id: scan_id.to_string(),
            n_gt: prediction.n_gt,
            n_dropped: prediction.n_dropped,
            kept_lesion_sizes: prediction.kept_sizes.clone(),
            spurious_blob_sizes: prediction.blob_sizes.clone(),
            expected: thresholds
                .iter()
                .map(|&t| (t, prediction.expected(SizeThreshold::voxels(t))))
                .collect(),
        }
    }
}

impl ExpectedSuite {
    /// Totals are summed per threshold over `scans`.
    pub fn new(seed: u64, scans: Vec<ExpectedScan>, thresholds: &[u64]) -> Self {
        let totals = thresholds
            .iter()
            .map(|&t| (t, scans.iter().map(|s| s.expected[&t]).sum()))
            .collect();
        ExpectedSuite { seed, scans, totals }
    }
}

/// Per-scan object counts realised by [`count_layout`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountSpec {
    pub n_gt: u64,
    pub n_tp: u64,
    /// False positives that survive a 250-voxel threshold (343 voxels).
    pub n_fp_large: u64,
    /// False positives below a 250-voxel threshold (125 voxels).
    pub n_fp_small: u64,
}

pub const COUNT_CELL: usize = 12;
pub const COUNT_LESION_EDGE: usize = 8;
pub const COUNT_FP_LARGE_EDGE: usize = 7;
pub const COUNT_FP_SMALL_EDGE: usize = 5;

/// Ground-truth and prediction masks realising exact counts.
///
/// Objects are cubes in separate 12-voxel cells of a 4x4xk grid: each
/// lesion is an 8³ cube, each TP prediction the lesion cube shifted by one
/// voxel along x, each large FP a 7³ cube and each small FP a 5³ cube.
pub fn count_layout(spec: CountSpec, spacing: [f64; 3]) -> Result<(VoxelGrid, VoxelGrid)> {
    if spec.n_tp > spec.n_gt {
        return Err(Error::Phantom(format!("TP {} exceeds ground truth {}", spec.n_tp, spec.n_gt)));
    }
    let cells = (spec.n_gt + spec.n_fp_large + spec.n_fp_small).max(1) as usize;
    let layers = cells.div_ceil(16);
    let dims = [4 * COUNT_CELL, 4 * COUNT_CELL, layers * COUNT_CELL];
    let n: usize = dims.iter().product();
    let mut gt = vec![LabelScheme::BODY as u8; n];
    let mut pred = vec![LabelScheme::BODY as u8; n];
    let cube = |buf: &mut [u8], cell: usize, edge: usize, dx: usize| {
        let origin = [(cell % 4) * COUNT_CELL + 2 + dx, ((cell / 4) % 4) * COUNT_CELL + 2, (cell / 16) * COUNT_CELL + 2];
        for z in 0..edge {
            for y in 0..edge {
                for x in 0..edge {
                    let p = [origin[0] + x, origin[1] + y, origin[2] + z];
                    buf[p[0] + dims[0] * (p[1] + dims[1] * p[2])] = LabelScheme::LESION as u8;
                }
            }
        }
    };
    let mut cell = 0;
    for k in 0..spec.n_gt {
        cube(&mut gt, cell, COUNT_LESION_EDGE, 0);
        if k < spec.n_tp {
            cube(&mut pred, cell, COUNT_LESION_EDGE, 1);
        }
        cell += 1;
    }
    for _ in 0..spec.n_fp_large {
        cube(&mut pred, cell, COUNT_FP_LARGE_EDGE, 0);
        cell += 1;
    }
    for _ in 0..spec.n_fp_small {
        cube(&mut pred, cell, COUNT_FP_SMALL_EDGE, 0);
        cell += 1;
    }
    Ok((
        VoxelGrid::label(dims, spacing, LabelData::U8(gt))?,
        VoxelGrid::label(dims, spacing, LabelData::U8(pred))?,
    ))
}
