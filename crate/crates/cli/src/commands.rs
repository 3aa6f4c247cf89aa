use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::Serialize;

use ppgl_core::annotations::{
    extend_to_slab, extract_body_fallback, load_annotations, rasterize_ground_truth, write_annotations, BoxAnnotation,
    SlabConfig, DEFAULT_BODY_HU,
};
use ppgl_core::batch::{evaluate_batch, list_volumes, pair_scans, scan_id_from_path};
use ppgl_core::evaluation::{
    format_table1, write_report, DetectionCounts, EvalConfig, FailedScan, MatchResult, UndefinedPrecision,
};
use ppgl_core::morphology::{connected_components, filter_by_size, size_percentile, ComponentList, SizeThreshold};
use ppgl_core::nifti::{load_volume, read_header, save_volume};
use ppgl_core::phantom::{build_scan, suite_templates, ExpectedScan, ExpectedSuite, PhantomSpec, ScanTemplate, SuiteSpec};
use ppgl_core::render::{render_with_overlays, save_png_gray, save_png_rgb, window_render, Overlay, GT_COLOR, PRED_COLOR};
use ppgl_core::{LabelScheme, VoxelKind};

use crate::config::{require_path, RunConfig};

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    Ok(rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build()?)
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut json = serde_json::to_string_pretty(value)?;
    json.push('\n');
    std::fs::write(path, json).with_context(|| format!("writing {}", path.display()))
}

fn report_failures(failed: &[FailedScan]) {
    for f in failed {
        eprintln!("scan {}: {}", f.scan_id, f.error);
    }
}

#[derive(Serialize)]
struct GtScanSummary {
    scan_id: String,
    n_annotations: usize,
    lesion_voxels: usize,
    body_voxels: usize,
    body_source: &'static str,
    /// Lesions whose slab was cut short by the volume boundary.
    clamped_lesions: Vec<String>,
}

#[derive(Serialize)]
struct GtSummary {
    extent_each_side: usize,
    n_scans: usize,
    n_annotations: usize,
    warnings: Vec<String>,
    scans: Vec<GtScanSummary>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    failed_scans: Vec<FailedScan>,
}

fn make_gt_scan(
    scan_id: &str,
    ct_path: &Path,
    anns: &[BoxAnnotation],
    body_path: Option<&Path>,
    cfg: &RunConfig,
    out_dir: &Path,
) -> Result<GtScanSummary> {
    let slab = SlabConfig {
        extent_each_side: cfg.extent_each_side.unwrap_or_default(),
    };
    let (body, body_source) = match body_path {
        Some(p) => (Some(load_volume(p, Some(VoxelKind::Label))?), "mask"),
        None if cfg.body_fallback == Some(true) => {
            let ct = load_volume(ct_path, Some(VoxelKind::Intensity))?;
            let hu = cfg.body_hu_threshold.unwrap_or(DEFAULT_BODY_HU);
            (Some(extract_body_fallback(&ct, hu)?), "fallback")
        }
        None => (None, "none"),
    };
    let (dims, spacing) = match &body {
        Some(b) if body_source == "fallback" => (b.dims(), b.spacing()),
        _ => {
            let h = read_header(ct_path)?;
            (h.dims()?, h.spacing()?)
        }
    };
    let clamped_lesions = anns
        .iter()
        .map(|a| Ok((a, extend_to_slab(a, slab, dims)?)))
        .collect::<ppgl_core::Result<Vec<_>>>()?
        .into_iter()
        .filter(|(_, s)| s.clamped)
        .map(|(a, _)| a.lesion_id.clone())
        .collect();
    let mask = rasterize_ground_truth(anns, body.as_ref(), dims, spacing, slab)?;
    drop(body);
    save_volume(&mask, out_dir.join(format!("{scan_id}.nii.gz")))?;
    let labels = mask.require_labels()?;
    Ok(GtScanSummary {
        scan_id: scan_id.to_string(),
        n_annotations: anns.len(),
        lesion_voxels: labels.count(LabelScheme::LESION),
        body_voxels: labels.count(LabelScheme::BODY),
        body_source,
        clamped_lesions,
    })
}

pub fn make_gt(mut cfg: RunConfig) -> Result<bool> {
    cfg.extent_each_side.get_or_insert(SlabConfig::default().extent_each_side);
    cfg.body_fallback.get_or_insert(false);
    if cfg.body_fallback == Some(true) {
        cfg.body_hu_threshold.get_or_insert(DEFAULT_BODY_HU);
    }
    cfg.workers = Some(cfg.workers());
    let ct_dir = require_path(&cfg.ct_dir, "CT directory", "--ct")?.to_path_buf();
    let ann_path = require_path(&cfg.annotations, "annotation file", "--annotations")?.to_path_buf();
    let body_dir = match &cfg.body_masks_dir {
        Some(_) => Some(require_path(&cfg.body_masks_dir, "body mask directory", "--body-masks")?.to_path_buf()),
        None => None,
    };
    let out = cfg.out()?.to_path_buf();
    cfg.echo()?;

    let annotations = load_annotations(&ann_path)?;
    let mut by_scan: BTreeMap<String, Vec<BoxAnnotation>> = BTreeMap::new();
    for a in annotations {
        by_scan.entry(a.scan_id.clone()).or_default().push(a);
    }
    let cts = list_volumes(&ct_dir)?;
    let bodies = match &body_dir {
        Some(d) => list_volumes(d)?,
        None => BTreeMap::new(),
    };
    let scan_ids: BTreeSet<&String> = cts.keys().chain(by_scan.keys()).collect();

    let mask_dir = out.join("gt-masks");
    create_dir(&mask_dir)?;
    let no_anns = Vec::new();
    let results: Vec<(String, Result<GtScanSummary>)> = pool(cfg.workers())?.install(|| {
        scan_ids
            .par_iter()
            .map(|&id| {
                let anns = by_scan.get(id).unwrap_or(&no_anns);
                let r = match cts.get(id) {
                    None => Err(anyhow::anyhow!(
                        "annotated scan {id} has no CT volume in {}",
                        ct_dir.display()
                    )),
                    Some(ct) => make_gt_scan(id, ct, anns, bodies.get(id).map(|p| p.as_path()), &cfg, &mask_dir),
                };
                (id.clone(), r)
            })
            .collect()
    });

    let mut scans = Vec::new();
    let mut failed = Vec::new();
    let mut warnings = Vec::new();
    for (scan_id, r) in results {
        match r {
            Ok(s) => {
                for l in &s.clamped_lesions {
                    warnings.push(format!("{}/{}: slab clamped at the volume boundary", s.scan_id, l));
                }
                scans.push(s);
            }
            Err(e) => failed.push(FailedScan {
                scan_id,
                error: format!("{e:#}"),
            }),
        }
    }
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    report_failures(&failed);
    let reports = out.join("reports");
    create_dir(&reports)?;
    let summary = GtSummary {
        extent_each_side: cfg.extent_each_side.unwrap_or_default(),
        n_scans: scans.len(),
        n_annotations: scans.iter().map(|s| s.n_annotations).sum(),
        warnings,
        scans,
        failed_scans: failed,
    };
    write_json(&reports.join("make-gt-summary.json"), &summary)?;
    println!("wrote {} ground-truth masks to {}", summary.n_scans, mask_dir.display());
    Ok(summary.failed_scans.is_empty())
}

#[derive(Serialize)]
struct ThresholdResult<'a> {
    size_threshold: SizeThreshold,
    #[serde(flatten)]
    counts: DetectionCounts,
    matching: &'a MatchResult,
}

#[derive(Serialize)]
struct ScanReport<'a> {
    scan_id: &'a str,
    results: Vec<ThresholdResult<'a>>,
}

fn report_name(t: SizeThreshold) -> String {
    match t {
        SizeThreshold::MinVoxels(n) => format!("metrics-t{n}.json"),
        SizeThreshold::MinVolumeMm3(v) => format!("metrics-{v}mm3.json"),
    }
}

pub fn evaluate(mut cfg: RunConfig) -> Result<bool> {
    let defaults = EvalConfig::default();
    let thresholds: Vec<SizeThreshold> = match &cfg.sweep {
        Some(s) if !s.is_empty() => {
            cfg.threshold = None;
            s.iter().map(|&t| SizeThreshold::voxels(t)).collect()
        }
        Some(_) => bail!("a sweep needs at least one threshold"),
        None => vec![*cfg.threshold.get_or_insert(defaults.threshold)],
    };
    let eval = EvalConfig {
        threshold: thresholds[0],
        connectivity: *cfg.connectivity.get_or_insert(defaults.connectivity),
        gt_lesion_label: *cfg.gt_lesion_label.get_or_insert(defaults.gt_lesion_label),
        pred_lesion: *cfg.pred_lesion.get_or_insert(defaults.pred_lesion),
    };
    let mode = *cfg.undefined_precision.get_or_insert(UndefinedPrecision::default());
    cfg.workers = Some(cfg.workers());
    let gt_dir = require_path(&cfg.gt_masks_dir, "ground-truth mask directory", "--gt-masks")?.to_path_buf();
    let pred_dir = require_path(&cfg.pred_masks_dir, "prediction mask directory", "--pred-masks")?.to_path_buf();
    let out = cfg.out()?.to_path_buf();
    cfg.echo()?;

    let pairing = pair_scans(&gt_dir, &pred_dir)?;
    let outcome = evaluate_batch(&pairing.pairs, &eval, &thresholds, cfg.workers())?;
    let mut failed: Vec<FailedScan> = outcome.failed.iter().chain(&pairing.unpaired).cloned().collect();
    failed.sort_by(|a, b| a.scan_id.cmp(&b.scan_id));
    report_failures(&failed);

    let reports_dir = out.join("reports");
    let scans_dir = reports_dir.join("scans");
    create_dir(&scans_dir)?;
    if let Some(first) = outcome.results.first() {
        for (i, r) in first.iter().enumerate() {
            let report = ScanReport {
                scan_id: &r.scan_id,
                results: thresholds
                    .iter()
                    .zip(&outcome.results)
                    .map(|(&t, rs)| ThresholdResult {
                        size_threshold: t,
                        counts: rs[i].counts(),
                        matching: &rs[i],
                    })
                    .collect(),
            };
            write_json(&scans_dir.join(format!("{}.json", r.scan_id)), &report)?;
        }
    }
    if outcome.results.first().is_none_or(|r| r.is_empty()) {
        bail!("no scan could be evaluated");
    }

    let reports = outcome.reports(mode, &pairing.unpaired)?;
    if cfg.sweep.is_some() {
        for r in &reports {
            write_report(r, reports_dir.join(report_name(r.size_threshold.unwrap_or_default())))?;
        }
    } else {
        write_report(&reports[0], reports_dir.join("metrics.json"))?;
    }
    let table = format_table1(&reports);
    std::fs::write(reports_dir.join("table1.txt"), &table)?;
    print!("{table}");
    Ok(failed.is_empty())
}

/// Accepts a suite spec (`mode` key), a single scan template (`phantom`
/// key) or a bare phantom spec.
fn load_suite_spec(path: &Path) -> Result<SuiteSpec> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let what = || format!("invalid phantom spec {}", path.display());
    let spec = if value.get("mode").is_some() {
        serde_json::from_value(value).with_context(what)?
    } else if value.get("phantom").is_some() {
        SuiteSpec::Explicit {
            scans: vec![serde_json::from_value::<ScanTemplate>(value).with_context(what)?],
            thresholds: vec![0, 250],
        }
    } else {
        SuiteSpec::Explicit {
            scans: vec![ScanTemplate {
                phantom: serde_json::from_value::<PhantomSpec>(value).with_context(what)?,
                perturbation: Default::default(),
            }],
            thresholds: vec![0, 250],
        }
    };
    Ok(spec)
}

#[derive(Serialize)]
struct SuiteEcho<'a> {
    count: usize,
    seed: u64,
    spec: &'a SuiteSpec,
}

pub fn phantom(cfg: RunConfig, spec_path: Option<&Path>, count: Option<usize>, seed: u64) -> Result<bool> {
    let spec = match spec_path {
        Some(p) => load_suite_spec(p)?,
        None => SuiteSpec::Random {
            params: Default::default(),
            thresholds: vec![0, 250],
        },
    };
    let out = cfg.out()?.to_path_buf();
    let templates = suite_templates(&spec, count, seed)?;
    let count = templates.len();
    for t in &templates {
        t.phantom.validate().with_context(|| format!("scan {}", t.phantom.scan_id))?;
    }
    let dirs = ["ct", "gt-masks", "body-masks", "pred-masks"].map(|d| out.join(d));
    for d in &dirs {
        create_dir(d)?;
    }
    write_json(&out.join("suite.json"), &SuiteEcho { count, seed, spec: &spec })?;

    let thresholds = spec.thresholds();
    let built: Vec<Result<(Vec<BoxAnnotation>, ExpectedScan)>> = pool(cfg.workers())?.install(|| {
        templates
            .par_iter()
            .map(|t| {
                let id = &t.phantom.scan_id;
                let scan = build_scan(t).with_context(|| format!("scan {id}"))?;
                let name = format!("{id}.nii.gz");
                save_volume(&scan.phantom.ct, dirs[0].join(&name))?;
                save_volume(&scan.phantom.gt_lesion_mask, dirs[1].join(&name))?;
                save_volume(&scan.phantom.body_mask, dirs[2].join(&name))?;
                save_volume(&scan.prediction.mask, dirs[3].join(&name))?;
                Ok((scan.phantom.annotations, ExpectedScan::new(id, &scan.prediction, thresholds)))
            })
            .collect()
    });
    let mut annotations = Vec::new();
    let mut scans = Vec::new();
    let mut errors = Vec::new();
    for b in built {
        match b {
            Ok((a, s)) => {
                annotations.extend(a);
                scans.push(s);
            }
            Err(e) => errors.push(format!("{e:#}")),
        }
    }
    if !errors.is_empty() {
        bail!("phantom generation failed:\n  {}", errors.join("\n  "));
    }
    write_annotations(out.join("gt-annotations.csv"), &annotations)?;
    let n_scans = scans.len();
    let expected = ExpectedSuite::new(seed, scans, thresholds);
    write_json(&out.join("expected.json"), &expected)?;
    println!("wrote {n_scans} phantom scans to {}", out.display());
    Ok(true)
}

pub struct RenderRequest {
    pub ct: PathBuf,
    pub slice: usize,
    pub center: f64,
    pub width: f64,
    pub gt: Option<PathBuf>,
    pub pred: Option<PathBuf>,
    pub gt_label: u32,
    pub pred_label: u32,
    pub out: PathBuf,
}

pub fn render(req: &RenderRequest) -> Result<bool> {
    let ct = load_volume(&req.ct, Some(VoxelKind::Intensity))?;
    let gt = req.gt.as_ref().map(|p| load_volume(p, Some(VoxelKind::Label))).transpose()?;
    let pred = req.pred.as_ref().map(|p| load_volume(p, Some(VoxelKind::Label))).transpose()?;
    let mut overlays = Vec::new();
    if let Some(m) = &gt {
        overlays.push(Overlay { mask: m, label: req.gt_label, color: GT_COLOR });
    }
    if let Some(m) = &pred {
        overlays.push(Overlay { mask: m, label: req.pred_label, color: PRED_COLOR });
    }
    if let Some(parent) = req.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    if overlays.is_empty() {
        save_png_gray(&window_render(&ct, req.center, req.width, req.slice)?, &req.out)?;
    } else {
        save_png_rgb(&render_with_overlays(&ct, req.center, req.width, req.slice, &overlays)?, &req.out)?;
    }
    Ok(true)
}

#[derive(Serialize)]
struct ComponentSummary {
    label: u32,
    n_scans: usize,
    n_components: usize,
    /// Nearest-rank percentiles of pooled component sizes, keyed by percent.
    size_percentiles: BTreeMap<String, u64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    failed_scans: Vec<FailedScan>,
}

pub fn components(mut cfg: RunConfig, input: &Path, label: u32, percentiles: &[f64]) -> Result<bool> {
    let connectivity = *cfg.connectivity.get_or_insert(Default::default());
    let threshold = *cfg.threshold.get_or_insert(SizeThreshold::NONE);
    cfg.workers = Some(cfg.workers());
    let out = cfg.out()?.to_path_buf();
    let files: BTreeMap<String, PathBuf> = if input.is_dir() {
        list_volumes(input)?
    } else if input.is_file() {
        let id = scan_id_from_path(input).with_context(|| format!("{} is not a .nii or .nii.gz file", input.display()))?;
        BTreeMap::from([(id, input.to_path_buf())])
    } else {
        bail!("input {} does not exist", input.display());
    };
    cfg.echo()?;
    let dir = out.join("reports").join("components");
    create_dir(&dir)?;

    let results: Vec<(String, Result<Vec<u64>>)> = pool(cfg.workers())?.install(|| {
        files
            .par_iter()
            .map(|(id, path)| {
                let r = (|| {
                    let mask = load_volume(path, Some(VoxelKind::Label))?;
                    let comps = filter_by_size(connected_components(&mask, label, connectivity)?, threshold);
                    let sizes = comps.iter().map(|c| c.voxel_count).collect();
                    write_json(&dir.join(format!("{id}.json")), &ComponentList { scan_id: id.clone(), components: comps })?;
                    Ok(sizes)
                })();
                (id.clone(), r)
            })
            .collect()
    });
    let mut sizes = Vec::new();
    let mut failed = Vec::new();
    let mut n_scans = 0;
    for (scan_id, r) in results {
        match r {
            Ok(s) => {
                n_scans += 1;
                sizes.extend(s);
            }
            Err(e) => failed.push(FailedScan { scan_id, error: format!("{e:#}") }),
        }
    }
    report_failures(&failed);
    let mut size_percentiles = BTreeMap::new();
    if !sizes.is_empty() {
        for &p in percentiles {
            size_percentiles.insert(p.to_string(), size_percentile(&sizes, p)?);
        }
    }
    let summary = ComponentSummary {
        label,
        n_scans,
        n_components: sizes.len(),
        size_percentiles,
        failed_scans: failed,
    };
    write_json(&out.join("reports").join("components-summary.json"), &summary)?;
    println!("{} components in {} scans", summary.n_components, summary.n_scans);
    for (p, v) in &summary.size_percentiles {
        println!("p{p} size: {v} voxels");
    }
    Ok(summary.failed_scans.is_empty())
}
