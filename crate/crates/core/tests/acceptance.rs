//! Acceptance gate. Runs every criterion in order, prints one PASS/FAIL line
//! each, and exits nonzero if any fails.

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;
use std::time::{Duration, Instant};

use ppgl_core::annotations::{extend_to_slab, rasterize_ground_truth, BoxAnnotation, SlabConfig};
use ppgl_core::batch::{evaluate_batch, pair_scans};
use ppgl_core::evaluation::{
    dataset_metrics, evaluate_pair, format_percent, EvalConfig, LesionSelector, MatchResult, UndefinedPrecision,
};
use ppgl_core::morphology::{connected_components, Connectivity, SizeThreshold};
use ppgl_core::nifti::{load_volume, save_volume, save_volume_as, Datatype};
use ppgl_core::phantom::{
    build_scan, count_layout, random_scan, splitmix64_at, CountSpec, RandomSuiteParams, ScanTemplate, SplitMix64,
};
use ppgl_core::{LabelData, LabelScheme, VoxelGrid, VoxelKind};
use serde::Deserialize;

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn within(limit: Duration, started: Instant, what: &str) -> Result<Duration, String> {
    let took = started.elapsed();
    ensure!(took < limit, "{what} took {took:.2?}, limit {limit:?}");
    Ok(took)
}

#[derive(Deserialize)]
struct FixtureScan {
    scan_id: String,
    n_gt: u64,
    n_tp: u64,
    n_fp_large: u64,
    n_fp_small: u64,
}

#[derive(Deserialize)]
struct Fixture {
    scans: Vec<FixtureScan>,
}

fn fixture() -> Fixture {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/split53_counts.json");
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn fixture_results(f: &Fixture, threshold: u64) -> Vec<MatchResult> {
    f.scans
        .iter()
        .map(|s| {
            let fp = if threshold == 0 { s.n_fp_large + s.n_fp_small } else { s.n_fp_large };
            MatchResult::from_counts(&s.scan_id, s.n_gt, s.n_tp, fp).unwrap()
        })
        .collect()
}

/// Criterion 1: micro-averaged precision and recall of the 53-scan count fixture.
fn criterion_1() -> Check {
    let started = Instant::now();
    let f = fixture();
    ensure!(f.scans.len() == 53, "fixture has {} scans", f.scans.len());
    let mut rows = Vec::new();
    for (t, fp, p_exp, r_exp) in [(0, 59, 62.4, 64.1), (250, 42, 70.0, 64.1)] {
        let m = dataset_metrics(&fixture_results(&f, t), UndefinedPrecision::Exclude).map_err(|e| e.to_string())?;
        let c = m.counts();
        ensure!(
            (c.n_gt, c.n_tp, c.n_fp, c.n_fn) == (153, 98, fp, 55),
            "threshold {t}: counts {c:?}"
        );
        let (p, r) = (m.precision.unwrap() * 100.0, m.recall.unwrap() * 100.0);
        ensure!((p - p_exp).abs() <= 0.05, "threshold {t}: precision {p} not within 0.05 of {p_exp}");
        ensure!((r - r_exp).abs() <= 0.05, "threshold {t}: recall {r} not within 0.05 of {r_exp}");
        ensure!(
            format_percent(m.precision) == format!("{p_exp:.1}%") && format_percent(m.recall) == format!("{r_exp:.1}%"),
            "threshold {t}: rounded {} / {}",
            format_percent(m.precision),
            format_percent(m.recall)
        );
        rows.push(format!("t={t}: P {} R {}", format_percent(m.precision), format_percent(m.recall)));
    }
    let took = within(Duration::from_secs(1), started, "count fixture")?;

    // The same counts realised as voxel masks and run through labeling and matching.
    let mut by_t: BTreeMap<u64, Vec<MatchResult>> = BTreeMap::new();
    for s in &f.scans {
        let spec = CountSpec {
            n_gt: s.n_gt,
            n_tp: s.n_tp,
            n_fp_large: s.n_fp_large,
            n_fp_small: s.n_fp_small,
        };
        let (gt, pred) = count_layout(spec, [0.8, 0.8, 2.5]).map_err(|e| e.to_string())?;
        for t in [0, 250] {
            let cfg = EvalConfig {
                threshold: SizeThreshold::voxels(t),
                ..Default::default()
            };
            by_t.entry(t).or_default().push(evaluate_pair(&s.scan_id, &gt, &pred, &cfg).map_err(|e| e.to_string())?);
        }
    }
    for (t, rs) in &by_t {
        let from_masks = dataset_metrics(rs, UndefinedPrecision::Exclude).map_err(|e| e.to_string())?;
        let from_counts = dataset_metrics(&fixture_results(&f, *t), UndefinedPrecision::Exclude).unwrap();
        ensure!(
            from_masks.counts() == from_counts.counts(),
            "threshold {t}: mask pipeline counts {:?} differ from fixture {:?}",
            from_masks.counts(),
            from_counts.counts()
        );
    }
    Ok(format!("{} ({took:.0?}); voxel-mask replay agrees", rows.join(", ")))
}

/// Criterion 2: threshold 250 vs 0 on a 50-scan phantom suite.
fn criterion_2() -> Check {
    let started = Instant::now();
    let params = RandomSuiteParams {
        small_blob_count: [1, 3],
        ..Default::default()
    };
    let mut removed_total = 0;
    let mut fp0_total = 0;
    for i in 0..50u64 {
        let (phantom, perturbation) = random_scan(&params, &format!("s{i:02}"), splitmix64_at(2024, i + 1));
        let scan = build_scan(&ScanTemplate { phantom, perturbation }).map_err(|e| e.to_string())?;
        let small = scan.prediction.blob_sizes.iter().filter(|&&s| s < 250).count() as u64;
        ensure!(
            scan.prediction.kept_sizes.iter().all(|&s| s >= 250),
            "scan {i}: a kept lesion is below 250 voxels"
        );
        let eval = |t: u64| {
            evaluate_pair(
                "s",
                &scan.phantom.gt_lesion_mask,
                &scan.prediction.mask,
                &EvalConfig {
                    threshold: SizeThreshold::voxels(t),
                    ..Default::default()
                },
            )
            .map(|r| r.counts())
            .map_err(|e| e.to_string())
        };
        let (c0, c250) = (eval(0)?, eval(250)?);
        ensure!(
            c0.n_tp == c250.n_tp && c0.n_fn == c250.n_fn,
            "scan {i}: TP/FN changed {c0:?} -> {c250:?}"
        );
        ensure!(
            c0.n_fp - c250.n_fp == small,
            "scan {i}: removed {} FPs, {small} sub-threshold blobs injected",
            c0.n_fp - c250.n_fp
        );
        ensure!(
            c0 == scan.prediction.expected(SizeThreshold::NONE)
                && c250 == scan.prediction.expected(SizeThreshold::voxels(250)),
            "scan {i}: counts differ from closed form"
        );
        removed_total += small;
        fp0_total += c0.n_fp;
    }
    ensure!(removed_total > 0, "suite injected no sub-threshold blobs");
    let took = within(Duration::from_secs(30), started, "50-scan suite")?;
    Ok(format!("50 scans, {removed_total} of {fp0_total} FPs removed, TP/FN unchanged ({took:.1?})"))
}

/// Criterion 3: closed-form triples on randomized phantom/perturbation pairs.
fn criterion_3() -> Check {
    let started = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = SplitMix64::new(77);
    let n = 240;
    let mut checked = 0;
    for i in 0..n {
        let params = RandomSuiteParams {
            dims: [48 + 8 * rng.int_in(0, 3) as usize, 48 + 8 * rng.int_in(0, 3) as usize, 32 + 8 * rng.int_in(0, 2) as usize],
            spacing: [rng.uniform(0.6, 1.0), rng.uniform(0.6, 1.0), rng.uniform(1.0, 5.0)],
            lesion_count: [0, 5],
            lesion_radius: [4.0, 7.0],
            drop_probability: rng.uniform(0.0, 0.6),
            large_blob_count: [0, 3],
            small_blob_count: [0, 4],
            max_jitter: rng.int_in(0, 2),
            noise_sigma: rng.uniform(0.0, 30.0),
            ..Default::default()
        };
        let (phantom, perturbation) = random_scan(&params, &format!("r{i:03}"), rng.next_u64());
        let scan = build_scan(&ScanTemplate { phantom, perturbation }).map_err(|e| format!("pair {i}: {e}"))?;
        let (mut gt, mut pred) = (scan.phantom.gt_lesion_mask.clone(), scan.prediction.mask.clone());
        if i % 8 == 0 {
            // Route some pairs through the file format as well.
            let (g, p) = (dir.path().join("g.nii.gz"), dir.path().join("p.nii"));
            save_volume(&gt, &g).and_then(|_| save_volume(&pred, &p)).map_err(|e| e.to_string())?;
            gt = load_volume(&g, Some(VoxelKind::Label)).map_err(|e| e.to_string())?;
            pred = load_volume(&p, Some(VoxelKind::Label)).map_err(|e| e.to_string())?;
        }
        let threshold = match i % 3 {
            0 => SizeThreshold::NONE,
            1 => SizeThreshold::voxels(250),
            _ => SizeThreshold::voxels(rng.int_in(1, 600) as u64),
        };
        let connectivity = if i % 5 == 0 { Connectivity::Six } else { Connectivity::TwentySix };
        let pred_lesion = if i % 7 == 0 { LesionSelector::NonBody } else { LesionSelector::Label(LabelScheme::LESION) };
        let cfg = EvalConfig {
            threshold,
            connectivity,
            pred_lesion,
            ..Default::default()
        };
        let got = evaluate_pair("r", &gt, &pred, &cfg).map_err(|e| e.to_string())?.counts();
        let want = scan.prediction.expected(threshold);
        ensure!(got == want, "pair {i} at {threshold}: got {got:?}, expected {want:?}");
        checked += 1;
    }
    let took = within(Duration::from_secs(300), started, "randomized pairs")?;
    Ok(format!("{checked} randomized pairs match closed-form triples ({took:.1?})"))
}

/// Flood-fill labeling: each foreground voxel mapped to the smallest index of its component.
fn bfs_partition(mask: &[u8], dims: [usize; 3], conn: Connectivity) -> Vec<Option<usize>> {
    let [nx, ny, nz] = dims;
    let mut rep = vec![None; mask.len()];
    let offsets: Vec<[i64; 3]> = (-1..=1)
        .flat_map(|dz| (-1..=1).flat_map(move |dy| (-1..=1).map(move |dx| [dx, dy, dz])))
        .filter(|d: &[i64; 3]| {
            let m = d.iter().map(|v| v.abs()).sum::<i64>();
            m > 0 && (conn == Connectivity::TwentySix || m == 1)
        })
        .collect();
    for seed in 0..mask.len() {
        if mask[seed] == 0 || rep[seed].is_some() {
            continue;
        }
        rep[seed] = Some(seed);
        let mut queue = VecDeque::from([seed]);
        while let Some(i) = queue.pop_front() {
            let p = [(i % nx) as i64, ((i / nx) % ny) as i64, (i / (nx * ny)) as i64];
            for d in &offsets {
                let q = [p[0] + d[0], p[1] + d[1], p[2] + d[2]];
                if q[0] < 0 || q[1] < 0 || q[2] < 0 || q[0] >= nx as i64 || q[1] >= ny as i64 || q[2] >= nz as i64 {
                    continue;
                }
                let j = q[0] as usize + nx * (q[1] as usize + ny * q[2] as usize);
                if mask[j] != 0 && rep[j].is_none() {
                    rep[j] = Some(seed);
                    queue.push_back(j);
                }
            }
        }
    }
    rep
}

/// Criterion 4: union-find labeling equals BFS flood fill on random masks.
fn criterion_4() -> Check {
    let started = Instant::now();
    let mut rng = SplitMix64::new(4);
    let n_masks = 1200;
    for m in 0..n_masks {
        let dims = [rng.int_in(1, 20) as usize, rng.int_in(1, 20) as usize, rng.int_in(1, 20) as usize];
        let density = rng.uniform(0.05, 0.7);
        let values: Vec<u8> = (0..dims.iter().product::<usize>())
            .map(|_| if rng.chance(density) { 2 } else if rng.chance(0.3) { 1 } else { 0 })
            .collect();
        let fg: Vec<u8> = values.iter().map(|&v| (v == 2) as u8).collect();
        let grid = VoxelGrid::label(dims, [1.0; 3], LabelData::U8(values)).unwrap();
        for conn in [Connectivity::Six, Connectivity::TwentySix] {
            let comps = connected_components(&grid, 2, conn).map_err(|e| e.to_string())?;
            let oracle = bfs_partition(&fg, dims, conn);
            let mut got = vec![None; fg.len()];
            for c in &comps {
                let min = c.voxels[0];
                for &v in &c.voxels {
                    ensure!(got[v].is_none(), "mask {m}: voxel {v} in two components");
                    got[v] = Some(min);
                }
            }
            ensure!(got == oracle, "mask {m} dims {dims:?} conn {conn}: partition differs from BFS");
            let n_oracle = oracle.iter().enumerate().filter(|(i, r)| **r == Some(*i)).count();
            ensure!(comps.len() == n_oracle, "mask {m}: component count");
            ensure!(
                comps.windows(2).all(|w| (w[0].voxel_count, std::cmp::Reverse(w[0].voxels[0]))
                    > (w[1].voxel_count, std::cmp::Reverse(w[1].voxels[0]))),
                "mask {m}: ids not ordered by size then min voxel"
            );
        }
    }
    let took = within(Duration::from_secs(60), started, "component oracle")?;
    Ok(format!("{n_masks} masks x 2 connectivities agree with BFS ({took:.1?})"))
}

/// Criterion 5: slab voxel counts, interior and clamped.
fn criterion_5() -> Check {
    let mut rng = SplitMix64::new(5);
    let (mut interior, mut clamped) = (0, 0);
    for case in 0..3000 {
        let dims = [rng.int_in(1, 40) as usize, rng.int_in(1, 40) as usize, rng.int_in(1, 30) as usize];
        let (x0, y0) = (rng.int_in(0, dims[0] as i64 - 1) as usize, rng.int_in(0, dims[1] as i64 - 1) as usize);
        let ann = BoxAnnotation {
            scan_id: "s".into(),
            lesion_id: "L".into(),
            slice_z: rng.int_in(0, dims[2] as i64 - 1) as usize,
            x_min: x0,
            y_min: y0,
            x_max: rng.int_in(x0 as i64, dims[0] as i64 - 1) as usize,
            y_max: rng.int_in(y0 as i64, dims[1] as i64 - 1) as usize,
        };
        let cfg = SlabConfig::default();
        let slab = extend_to_slab(&ann, cfg, dims).map_err(|e| e.to_string())?;
        let mask = rasterize_ground_truth(std::slice::from_ref(&ann), None, dims, [1.0; 3], cfg).map_err(|e| e.to_string())?;
        let count = mask.labels().unwrap().count(LabelScheme::LESION);
        let area = (ann.x_max - ann.x_min + 1) * (ann.y_max - ann.y_min + 1);
        let z_lo = ann.slice_z.saturating_sub(3);
        let z_hi = (ann.slice_z + 3).min(dims[2] - 1);
        ensure!(
            (slab.bounds.z_min, slab.bounds.z_max) == (z_lo, z_hi),
            "case {case}: z range {:?}",
            (slab.bounds.z_min, slab.bounds.z_max)
        );
        if ann.slice_z >= 3 && ann.slice_z + 3 < dims[2] {
            ensure!(!slab.clamped && count == 7 * area, "case {case}: interior slab has {count} voxels, area {area}");
            interior += 1;
        } else {
            ensure!(
                slab.clamped && count == (z_hi - z_lo + 1) * area,
                "case {case}: clamped slab has {count} voxels"
            );
            clamped += 1;
        }
    }
    let ex = |z, nz| {
        let a = BoxAnnotation {
            scan_id: "s".into(),
            lesion_id: "L".into(),
            slice_z: z,
            x_min: 10,
            y_min: 12,
            x_max: 20,
            y_max: 22,
        };
        extend_to_slab(&a, SlabConfig::default(), [64, 64, nz]).map(|s| (s.bounds.z_min, s.bounds.z_max))
    };
    ensure!(matches!(ex(79, 200), Ok((76, 82))), "slice 79 example");
    ensure!(matches!(ex(1, 200), Ok((0, 4))), "slice 1 example");
    Ok(format!("{interior} interior and {clamped} clamped slabs exact"))
}

fn oracle_quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn rel_close(a: f64, b: f64) -> bool {
    a == b || (a - b).abs() <= 1e-12 * a.abs().max(b.abs())
}

/// Criterion 6: patient-level statistics vs a sort-based oracle, plus the
/// recall row of the 53-scan fixture.
fn criterion_6() -> Check {
    let mut rng = SplitMix64::new(6);
    let mut trials = 0;
    for trial in 0..500 {
        let n = rng.int_in(1, 80) as usize;
        let results: Vec<MatchResult> = (0..n)
            .map(|i| {
                let gt = rng.int_in(0, 12) as u64;
                let tp = rng.int_in(0, gt as i64) as u64;
                let fp = rng.int_in(0, 9) as u64;
                MatchResult::from_counts(format!("p{i:03}"), gt, tp, fp).unwrap()
            })
            .collect();
        for mode in [UndefinedPrecision::Exclude, UndefinedPrecision::ImputeZero, UndefinedPrecision::ImputeOne] {
            let report = dataset_metrics(&results, mode).map_err(|e| e.to_string())?;
            let mut prec = Vec::new();
            let mut rec = Vec::new();
            for r in &results {
                let c = r.counts();
                match (c.n_tp + c.n_fp, mode) {
                    (0, UndefinedPrecision::Exclude) => {}
                    (0, UndefinedPrecision::ImputeZero) => prec.push(0.0),
                    (0, UndefinedPrecision::ImputeOne) => prec.push(1.0),
                    (d, _) => prec.push(c.n_tp as f64 / d as f64),
                }
                if c.n_tp + c.n_fn > 0 {
                    rec.push(c.n_tp as f64 / (c.n_tp + c.n_fn) as f64);
                }
            }
            for (name, vals, got) in [
                ("precision", &mut prec, report.patient_level.precision),
                ("recall", &mut rec, report.patient_level.recall),
            ] {
                if vals.is_empty() {
                    ensure!(got.is_none(), "trial {trial}: {name} stats for empty set");
                    continue;
                }
                let got = got.ok_or(format!("trial {trial}: missing {name} stats"))?;
                vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let k = vals.len() as f64;
                let mean = vals.iter().sum::<f64>() / k;
                let sd = if vals.len() > 1 {
                    (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt()
                } else {
                    0.0
                };
                let want = [mean, sd, oracle_quantile(vals, 0.5), oracle_quantile(vals, 0.25), oracle_quantile(vals, 0.75)];
                let have = [got.mean, got.std_dev, got.median, got.iqr_lo, got.iqr_hi];
                ensure!(got.n == vals.len(), "trial {trial}: {name} n");
                for (w, h) in want.iter().zip(have) {
                    ensure!(rel_close(*w, h), "trial {trial} {mode:?} {name}: {h} vs oracle {w}");
                }
            }
        }
        trials += 1;
    }

    let f = fixture();
    let m0 = dataset_metrics(&fixture_results(&f, 0), UndefinedPrecision::Exclude).map_err(|e| e.to_string())?;
    let m250 = dataset_metrics(&fixture_results(&f, 250), UndefinedPrecision::Exclude).map_err(|e| e.to_string())?;
    for m in [&m0, &m250] {
        let r = m.patient_level.recall.ok_or("no recall stats")?;
        let row = (format_percent(Some(r.median)), format_percent(Some(r.iqr_lo)), format_percent(Some(r.iqr_hi)));
        ensure!(
            row == ("100.0%".into(), "50.0%".into(), "100.0%".into()),
            "fixture recall median/IQR {row:?}"
        );
    }
    let recall_row = m0.table2_rows()[1].clone();
    ensure!(
        recall_row == "Recall & 66.7% & 40.2% & 100.0% & 50.0% - 100.0%",
        "fixture recall row {recall_row:?}"
    );
    ensure!(m250.table2_rows()[1] == recall_row, "recall row changed with threshold");
    Ok(format!("{trials} random trials x 3 modes within 1e-12; fixture row \"{recall_row}\""))
}

/// Criterion 7: save then load is the identity for all datatypes, plain and gzip.
fn criterion_7() -> Check {
    let started = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = SplitMix64::new(7);
    let mut n = 0;
    for case in 0..400 {
        let dims = [rng.int_in(1, 16) as usize, rng.int_in(1, 16) as usize, rng.int_in(1, 16) as usize];
        let spacing = [rng.uniform(0.3, 5.0), rng.uniform(0.3, 5.0), rng.uniform(0.3, 5.0)].map(|s| s as f32 as f64);
        let len: usize = dims.iter().product();
        let dt = [Datatype::U8, Datatype::I16, Datatype::I32, Datatype::F32][case % 4];
        let grid = match dt {
            Datatype::U8 => VoxelGrid::label(dims, spacing, LabelData::from_values((0..len).map(|_| rng.int_in(0, 255) as u32).collect())),
            Datatype::I16 => VoxelGrid::label(dims, spacing, LabelData::from_values((0..len).map(|_| rng.int_in(0, 32767) as u32).collect())),
            Datatype::I32 => VoxelGrid::label(
                dims,
                spacing,
                LabelData::from_values((0..len).map(|_| rng.int_in(0, i32::MAX as i64) as u32).collect()),
            ),
            Datatype::F32 => VoxelGrid::intensity(
                dims,
                spacing,
                (0..len).map(|_| rng.uniform(-1024.0, 3071.0) as f32).collect(),
            ),
        }
        .unwrap();
        for ext in ["nii", "nii.gz"] {
            let path = dir.path().join(format!("c{case}.{ext}"));
            save_volume_as(&grid, &path, dt).map_err(|e| format!("case {case}: {e}"))?;
            let back = load_volume(&path, Some(grid.kind())).map_err(|e| format!("case {case}: {e}"))?;
            ensure!(back == grid, "case {case} {ext} datatype {}: round trip differs", dt.code());
            n += 1;
        }
    }
    let took = within(Duration::from_secs(60), started, "round trips")?;
    Ok(format!("{n} round trips over u8/i16/i32/f32, plain and gzip ({took:.1?})"))
}

/// Sparse 512x512x400 mask: ~1% foreground in ellipsoidal blobs plus speckle.
fn large_mask(seed: u64, dims: [usize; 3], label: u8) -> VoxelGrid {
    let [nx, ny, nz] = dims;
    let mut v = vec![LabelScheme::BACKGROUND as u8; nx * ny * nz];
    let mut rng = SplitMix64::new(seed);
    let target = v.len() / 100;
    let mut filled = 0;
    while filled < target {
        let r = [rng.uniform(2.0, 14.0), rng.uniform(2.0, 14.0), rng.uniform(1.0, 6.0)];
        let c = [rng.uniform(0.0, nx as f64), rng.uniform(0.0, ny as f64), rng.uniform(0.0, nz as f64)];
        for idx in ppgl_core::phantom::ellipsoid_voxels(dims, c, r) {
            if v[idx] == 0 {
                v[idx] = label;
                filled += 1;
            }
        }
        for _ in 0..20 {
            let i = (rng.next_u64() % v.len() as u64) as usize;
            if v[i] == 0 {
                v[i] = label;
                filled += 1;
            }
        }
    }
    VoxelGrid::label(dims, [0.8, 0.8, 1.25], LabelData::U8(v)).unwrap()
}

/// Criterion 8: labeling and batch throughput at 512x512x400.
fn criterion_8() -> Check {
    let dims = [512, 512, 400];
    let pred = large_mask(81, dims, 2);
    let fg = pred.labels().unwrap().count(2);
    let started = Instant::now();
    let comps = connected_components(&pred, 2, Connectivity::TwentySix).map_err(|e| e.to_string())?;
    let label_time = within(Duration::from_secs(10), started, "512x512x400 labeling")?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (gt_dir, pred_dir) = (dir.path().join("gt"), dir.path().join("pred"));
    std::fs::create_dir_all(&gt_dir).unwrap();
    std::fs::create_dir_all(&pred_dir).unwrap();
    let gt = large_mask(82, dims, 2);
    save_volume(&gt, gt_dir.join("scan_000.nii.gz")).map_err(|e| e.to_string())?;
    save_volume(&pred, pred_dir.join("scan_000.nii.gz")).map_err(|e| e.to_string())?;
    drop((gt, pred, comps));
    for i in 1..53 {
        for d in [&gt_dir, &pred_dir] {
            std::fs::copy(d.join("scan_000.nii.gz"), d.join(format!("scan_{i:03}.nii.gz"))).unwrap();
        }
    }
    let pairing = pair_scans(&gt_dir, &pred_dir).map_err(|e| e.to_string())?;
    ensure!(pairing.pairs.len() == 53 && pairing.unpaired.is_empty(), "pairing");
    let started = Instant::now();
    let thresholds = [SizeThreshold::NONE, SizeThreshold::voxels(250)];
    let outcome = evaluate_batch(&pairing.pairs, &EvalConfig::default(), &thresholds, 8).map_err(|e| e.to_string())?;
    let batch_time = within(Duration::from_secs(300), started, "53-scan batch")?;
    ensure!(outcome.failed.is_empty(), "failed scans: {:?}", outcome.failed);
    ensure!(outcome.results.iter().all(|r| r.len() == 53), "missing results");
    let first = outcome.results[0][0].counts();
    ensure!(outcome.results[0].iter().all(|r| r.counts() == first), "identical scans gave different counts");
    Ok(format!(
        "labeling {fg} fg voxels in {label_time:.2?}; 53-scan batch (8 workers, thresholds 0 and 250) in {batch_time:.1?}"
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Check); 8] = [
        ("count fixture precision/recall", criterion_1),
        ("threshold 250 vs 0 on phantom suite", criterion_2),
        ("end-to-end phantom oracle", criterion_3),
        ("connected components vs BFS", criterion_4),
        ("weak-slab geometry", criterion_5),
        ("patient-level statistics", criterion_6),
        ("NIfTI round trip", criterion_7),
        ("performance", criterion_8),
    ];
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !only.is_empty() && !only.iter().any(|a| a == &n.to_string()) {
            continue;
        }
        match std::panic::catch_unwind(*f) {
            Ok(Ok(detail)) => println!("acceptance {n} PASS {name}: {detail}"),
            Ok(Err(why)) => {
                failed += 1;
                println!("acceptance {n} FAIL {name}: {why}");
            }
            Err(_) => {
                failed += 1;
                println!("acceptance {n} FAIL {name}: panicked");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
