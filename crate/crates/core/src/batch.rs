//! Directory-level evaluation: pair masks by scan id and fan out over a
//! bounded worker pool.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::evaluation::{
    dataset_metrics, match_with_threshold, scan_components, EvalConfig, FailedScan, MatchResult, MetricsReport,
    UndefinedPrecision,
};
use crate::morphology::SizeThreshold;
use crate::nifti::load_volume;
use crate::volume::VoxelKind;

/// Scan id of a volume file: the file name without `.nii` / `.nii.gz`.
pub fn scan_id_from_path(path: &Path) -> Option<String> {
    let name = path.file_name()?.to_str()?;
    let stem = name.strip_suffix(".nii.gz").or_else(|| name.strip_suffix(".nii"))?;
    (!stem.is_empty()).then(|| stem.to_string())
}

/// NIfTI files of a directory keyed by scan id.
pub fn list_volumes(dir: impl AsRef<Path>) -> Result<BTreeMap<String, PathBuf>> {
    let dir = dir.as_ref();
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if !path.is_file() {
            continue;
        }
        if let Some(id) = scan_id_from_path(&path) {
            if let Some(prev) = out.insert(id.clone(), path.clone()) {
                return Err(Error::Duplicate(format!(
                    "scan {id} appears as both {} and {}",
                    prev.display(),
                    path.display()
                )));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScanPair {
    pub scan_id: String,
    pub gt: PathBuf,
    pub pred: PathBuf,
}

#[derive(Debug, Clone, Default)]
pub struct Pairing {
    pub pairs: Vec<ScanPair>,
    /// Scans present on one side only.
    pub unpaired: Vec<FailedScan>,
}

pub fn pair_scans(gt_dir: impl AsRef<Path>, pred_dir: impl AsRef<Path>) -> Result<Pairing> {
    let gt = list_volumes(gt_dir)?;
    let mut pred = list_volumes(pred_dir)?;
    let mut pairing = Pairing::default();
    for (id, g) in gt {
        match pred.remove(&id) {
            Some(p) => pairing.pairs.push(ScanPair {
                scan_id: id,
                gt: g,
                pred: p,
            }),
            None => pairing.unpaired.push(FailedScan {
                scan_id: id,
                error: "no prediction mask".into(),
            }),
        }
    }
    for id in pred.into_keys() {
        pairing.unpaired.push(FailedScan {
            scan_id: id,
            error: "no ground-truth mask".into(),
        });
    }
    pairing.unpaired.sort_by(|a, b| a.scan_id.cmp(&b.scan_id));
    Ok(pairing)
}

/// Per-threshold results, each ordered by scan id, plus scans that failed.
#[derive(Debug, Clone)]
pub struct BatchOutcome {
    pub thresholds: Vec<SizeThreshold>,
    pub results: Vec<Vec<MatchResult>>,
    pub failed: Vec<FailedScan>,
}

fn evaluate_one(pair: &ScanPair, cfg: &EvalConfig, thresholds: &[SizeThreshold]) -> Result<Vec<MatchResult>> {
    let gt = load_volume(&pair.gt, Some(VoxelKind::Label))?;
    let pred = load_volume(&pair.pred, Some(VoxelKind::Label))?;
    let comps = scan_components(&gt, &pred, cfg)?;
    drop((gt, pred));
    thresholds
        .iter()
        .map(|&t| match_with_threshold(&pair.scan_id, &comps, t))
        .collect()
}

/// Evaluate every pair at each threshold. Components are computed once per
/// scan. A failing scan is recorded and never aborts the batch.
pub fn evaluate_batch(
    pairs: &[ScanPair],
    cfg: &EvalConfig,
    thresholds: &[SizeThreshold],
    workers: usize,
) -> Result<BatchOutcome> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidGrid(format!("worker pool: {e}")))?;
    let mut per_scan: Vec<(String, Result<Vec<MatchResult>>)> = pool.install(|| {
        pairs
            .par_iter()
            .map(|p| (p.scan_id.clone(), evaluate_one(p, cfg, thresholds)))
            .collect()
    });
    per_scan.sort_by(|a, b| a.0.cmp(&b.0));

    let mut results = vec![Vec::new(); thresholds.len()];
    let mut failed = Vec::new();
    for (scan_id, r) in per_scan {
        match r {
            Ok(rs) => {
                for (slot, m) in results.iter_mut().zip(rs) {
                    slot.push(m);
                }
            }
            Err(e) => failed.push(FailedScan {
                scan_id,
                error: e.to_string(),
            }),
        }
    }
    Ok(BatchOutcome {
        thresholds: thresholds.to_vec(),
        results,
        failed,
    })
}

impl BatchOutcome {
    /// One dataset report per threshold, with failed scans attached.
    pub fn reports(&self, mode: UndefinedPrecision, extra_failed: &[FailedScan]) -> Result<Vec<MetricsReport>> {
        let mut failed: Vec<FailedScan> = self.failed.iter().chain(extra_failed).cloned().collect();
        failed.sort_by(|a, b| a.scan_id.cmp(&b.scan_id));
        self.thresholds
            .iter()
            .zip(&self.results)
            .map(|(&t, rs)| {
                let mut report = dataset_metrics(rs, mode)?.with_threshold(t);
                report.failed_scans = failed.clone();
                Ok(report)
            })
            .collect()
    }
}
