//! Overlap-based detection matching and dataset / patient-level metrics.
//!
//! A ground-truth lesion is a true positive when at least one retained
//! prediction shares a voxel with it; a prediction sharing no voxel with any
//! ground-truth lesion is a false positive. TP is therefore counted per
//! ground-truth lesion and FP per predicted component.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::morphology::{connected_components, connected_components_where, filter_by_size, Component, Connectivity, SizeThreshold};
use crate::volume::{LabelScheme, VoxelGrid};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverlapPair {
    pub gt_id: u32,
    pub pred_id: u32,
    pub overlap_voxels: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DetectionCounts {
    pub n_gt: u64,
    pub n_tp: u64,
    pub n_fp: u64,
    pub n_fn: u64,
}

impl DetectionCounts {
    pub fn precision(&self) -> Option<f64> {
        ratio(self.n_tp, self.n_tp + self.n_fp)
    }

    pub fn recall(&self) -> Option<f64> {
        ratio(self.n_tp, self.n_tp + self.n_fn)
    }
}

impl std::ops::Add for DetectionCounts {
    type Output = DetectionCounts;

    fn add(self, o: DetectionCounts) -> DetectionCounts {
        DetectionCounts {
            n_gt: self.n_gt + o.n_gt,
            n_tp: self.n_tp + o.n_tp,
            n_fp: self.n_fp + o.n_fp,
            n_fn: self.n_fn + o.n_fn,
        }
    }
}

impl std::iter::Sum for DetectionCounts {
    fn sum<I: Iterator<Item = DetectionCounts>>(iter: I) -> Self {
        iter.fold(DetectionCounts::default(), |a, b| a + b)
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// TP/FP/FN assignment for one scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub scan_id: String,
    /// Free-form stratification tag carried through to reports.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
    pub tp_gt_ids: BTreeSet<u32>,
    pub fn_gt_ids: BTreeSet<u32>,
    pub fp_pred_ids: BTreeSet<u32>,
    /// Sorted by (gt_id, pred_id).
    pub pairs: Vec<OverlapPair>,
    /// Predicted components discarded by the size threshold before matching.
    #[serde(default)]
    pub n_pred_removed: u64,
}

impl MatchResult {
    pub fn counts(&self) -> DetectionCounts {
        DetectionCounts {
            n_gt: (self.tp_gt_ids.len() + self.fn_gt_ids.len()) as u64,
            n_tp: self.tp_gt_ids.len() as u64,
            n_fp: self.fp_pred_ids.len() as u64,
            n_fn: self.fn_gt_ids.len() as u64,
        }
    }

    /// Ids of predictions that overlap some ground truth.
    pub fn matched_pred_ids(&self) -> BTreeSet<u32> {
        self.pairs.iter().map(|p| p.pred_id).collect()
    }

    /// A result with the given counts and no voxel-level detail: TP ids are
    /// 1..=tp, FN ids follow, and TP lesion `i` is paired with prediction `i`.
    pub fn from_counts(scan_id: impl Into<String>, n_gt: u64, n_tp: u64, n_fp: u64) -> Result<Self> {
        if n_tp > n_gt {
            return Err(Error::InvalidGrid(format!("TP {n_tp} exceeds ground truth {n_gt}")));
        }
        let tp: BTreeSet<u32> = (1..=n_tp as u32).collect();
        Ok(MatchResult {
            scan_id: scan_id.into(),
            group: None,
            pairs: tp
                .iter()
                .map(|&i| OverlapPair {
                    gt_id: i,
                    pred_id: i,
                    overlap_voxels: 1,
                })
                .collect(),
            tp_gt_ids: tp,
            fn_gt_ids: (n_tp as u32 + 1..=n_gt as u32).collect(),
            fp_pred_ids: (n_tp as u32 + 1..=(n_tp + n_fp) as u32).collect(),
            n_pred_removed: 0,
        })
    }
}

/// Every voxel of every component tagged with its component id, sorted by voxel.
fn tagged_voxels(list: &[Component]) -> Vec<(usize, u32)> {
    let mut v: Vec<(usize, u32)> = list
        .iter()
        .flat_map(|c| c.voxels.iter().map(move |&i| (i, c.id)))
        .collect();
    v.par_sort_unstable();
    v
}

/// Overlap sizes of all intersecting (gt, pred) pairs, via one merge pass
/// over the voxel-sorted tag lists.
fn overlap_pairs(gt: &[Component], pred: &[Component]) -> Vec<OverlapPair> {
    let (a, b) = (tagged_voxels(gt), tagged_voxels(pred));
    let mut counts: BTreeMap<(u32, u32), u64> = BTreeMap::new();
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].0.cmp(&b[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                // Runs of equal voxels, in case components within a list overlap.
                let v = a[i].0;
                let i_end = i + a[i..].iter().take_while(|t| t.0 == v).count();
                let j_end = j + b[j..].iter().take_while(|t| t.0 == v).count();
                for ga in &a[i..i_end] {
                    for pb in &b[j..j_end] {
                        *counts.entry((ga.1, pb.1)).or_default() += 1;
                    }
                }
                i = i_end;
                j = j_end;
            }
        }
    }
    counts
        .into_iter()
        .map(|((gt_id, pred_id), overlap_voxels)| OverlapPair {
            gt_id,
            pred_id,
            overlap_voxels,
        })
        .collect()
}

fn check_unique_ids(list: &[Component], what: &str) -> Result<()> {
    let mut seen = HashSet::new();
    for c in list {
        if !seen.insert(c.id) {
            return Err(Error::Duplicate(format!("{what} component id {}", c.id)));
        }
    }
    Ok(())
}

/// Match ground-truth and predicted components of one scan by voxel overlap.
///
/// Components must carry their voxel lists; components deserialized from
/// JSON (which omits voxels) never overlap anything.
pub fn match_scan(scan_id: &str, gt: &[Component], pred: &[Component]) -> Result<MatchResult> {
    check_unique_ids(gt, "ground-truth")?;
    check_unique_ids(pred, "predicted")?;
    let pairs = overlap_pairs(gt, pred);
    let hit_gt: BTreeSet<u32> = pairs.iter().map(|p| p.gt_id).collect();
    let hit_pred: BTreeSet<u32> = pairs.iter().map(|p| p.pred_id).collect();
    Ok(MatchResult {
        scan_id: scan_id.to_string(),
        group: None,
        tp_gt_ids: gt.iter().map(|g| g.id).filter(|id| hit_gt.contains(id)).collect(),
        fn_gt_ids: gt.iter().map(|g| g.id).filter(|id| !hit_gt.contains(id)).collect(),
        fp_pred_ids: pred.iter().map(|p| p.id).filter(|id| !hit_pred.contains(id)).collect(),
        pairs,
        n_pred_removed: 0,
    })
}

/// Which voxels of a prediction mask count as lesion. Serialized as the
/// label number or the string `"nonbody"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "SelectorRepr", into = "SelectorRepr")]
pub enum LesionSelector {
    /// Exactly this label value.
    Label(u32),
    /// Every nonzero value other than the body label.
    NonBody,
}

impl Default for LesionSelector {
    fn default() -> Self {
        LesionSelector::Label(LabelScheme::LESION)
    }
}

impl LesionSelector {
    pub fn selects(&self, v: u32) -> bool {
        match *self {
            LesionSelector::Label(l) => v == l,
            LesionSelector::NonBody => v != LabelScheme::BACKGROUND && v != LabelScheme::BODY,
        }
    }
}

impl FromStr for LesionSelector {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim() {
            "nonbody" | "non-body" | "non_body" => Ok(LesionSelector::NonBody),
            other => other
                .parse()
                .map(LesionSelector::Label)
                .map_err(|_| format!("lesion label must be an integer or \"nonbody\", got {other:?}")),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum SelectorRepr {
    Label(u32),
    Name(String),
}

impl TryFrom<SelectorRepr> for LesionSelector {
    type Error = String;

    fn try_from(r: SelectorRepr) -> std::result::Result<Self, String> {
        match r {
            SelectorRepr::Label(l) => Ok(LesionSelector::Label(l)),
            SelectorRepr::Name(s) => s.parse(),
        }
    }
}

impl From<LesionSelector> for SelectorRepr {
    fn from(s: LesionSelector) -> Self {
        match s {
            LesionSelector::Label(l) => SelectorRepr::Label(l),
            LesionSelector::NonBody => SelectorRepr::Name("nonbody".into()),
        }
    }
}

impl fmt::Display for LesionSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LesionSelector::Label(l) => write!(f, "{l}"),
            LesionSelector::NonBody => write!(f, "nonbody"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Applied to predictions only.
    pub threshold: SizeThreshold,
    pub connectivity: Connectivity,
    pub gt_lesion_label: u32,
    pub pred_lesion: LesionSelector,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            threshold: SizeThreshold::NONE,
            connectivity: Connectivity::TwentySix,
            gt_lesion_label: LabelScheme::LESION,
            pred_lesion: LesionSelector::default(),
        }
    }
}

/// Ground-truth and unfiltered predicted components of one scan.
pub struct ScanComponents {
    pub gt: Vec<Component>,
    pub pred: Vec<Component>,
}

pub fn scan_components(gt_mask: &VoxelGrid, pred_mask: &VoxelGrid, cfg: &EvalConfig) -> Result<ScanComponents> {
    gt_mask.same_dims(pred_mask)?;
    let gt = connected_components(gt_mask, cfg.gt_lesion_label, cfg.connectivity)?;
    let selector = cfg.pred_lesion;
    let pred = connected_components_where(pred_mask, cfg.connectivity, move |v| selector.selects(v))?;
    Ok(ScanComponents { gt, pred })
}

/// Size-filter the predictions (never the ground truth), then match.
pub fn match_with_threshold(scan_id: &str, comps: &ScanComponents, threshold: SizeThreshold) -> Result<MatchResult> {
    let kept = filter_by_size(comps.pred.clone(), threshold);
    let removed = (comps.pred.len() - kept.len()) as u64;
    let mut result = match_scan(scan_id, &comps.gt, &kept)?;
    result.n_pred_removed = removed;
    Ok(result)
}

/// Full per-scan pipeline: label both masks, filter predictions, match.
pub fn evaluate_pair(scan_id: &str, gt_mask: &VoxelGrid, pred_mask: &VoxelGrid, cfg: &EvalConfig) -> Result<MatchResult> {
    let comps = scan_components(gt_mask, pred_mask, cfg)?;
    match_with_threshold(scan_id, &comps, cfg.threshold)
}

/// How scans with no retained predictions enter the patient-level precision
/// distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UndefinedPrecision {
    #[default]
    Exclude,
    ImputeZero,
    ImputeOne,
}

impl FromStr for UndefinedPrecision {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().replace('-', "_").as_str() {
            "exclude" => Ok(UndefinedPrecision::Exclude),
            "zero" | "impute_zero" => Ok(UndefinedPrecision::ImputeZero),
            "one" | "impute_one" => Ok(UndefinedPrecision::ImputeOne),
            other => Err(format!("expected exclude, impute-zero or impute-one, got {other:?}")),
        }
    }
}

/// Summary of a per-scan ratio distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistributionStats {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation (n - 1 divisor); 0 for a single value.
    pub std_dev: f64,
    pub median: f64,
    /// 25th percentile.
    pub iqr_lo: f64,
    /// 75th percentile.
    pub iqr_hi: f64,
}

/// Percentile by linear interpolation between closest ranks on sorted data
/// (position `(n - 1) * q`).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

impl DistributionStats {
    pub fn from_values(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mean = sorted.iter().sum::<f64>() / n as f64;
        let std_dev = if n > 1 {
            (sorted.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(DistributionStats {
            n,
            mean,
            std_dev,
            median: quantile_sorted(&sorted, 0.5),
            iqr_lo: quantile_sorted(&sorted, 0.25),
            iqr_hi: quantile_sorted(&sorted, 0.75),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientLevel {
    pub precision: Option<DistributionStats>,
    pub recall: Option<DistributionStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanSummary {
    pub scan_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
    #[serde(flatten)]
    pub counts: DetectionCounts,
    pub n_pred_removed: u64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedScan {
    pub scan_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size_threshold: Option<SizeThreshold>,
    pub undefined_precision: UndefinedPrecision,
    pub n_scans: usize,
    pub n_gt: u64,
    pub n_tp: u64,
    pub n_fp: u64,
    pub n_fn: u64,
    pub n_pred_removed: u64,
    /// Micro-averaged over summed counts.
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub patient_level: PatientLevel,
    pub n_scans_excluded_from_precision: usize,
    pub n_scans_excluded_from_recall: usize,
    pub scans: Vec<ScanSummary>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failed_scans: Vec<FailedScan>,
}

/// Dataset-level fold over per-scan results. Scans are ordered by id, so
/// the result does not depend on input order.
pub fn dataset_metrics(results: &[MatchResult], mode: UndefinedPrecision) -> Result<MetricsReport> {
    if results.is_empty() {
        return Err(Error::Empty("no scans"));
    }
    let mut ordered: Vec<&MatchResult> = results.iter().collect();
    ordered.sort_by(|a, b| a.scan_id.cmp(&b.scan_id));
    if let Some(w) = ordered.windows(2).find(|w| w[0].scan_id == w[1].scan_id) {
        return Err(Error::Duplicate(format!("scan {}", w[0].scan_id)));
    }

    let mut precisions = Vec::new();
    let mut recalls = Vec::new();
    let mut excluded_p = 0;
    let mut excluded_r = 0;
    let mut scans = Vec::with_capacity(ordered.len());
    for r in &ordered {
        let c = r.counts();
        let (p, rc) = (c.precision(), c.recall());
        match (p, mode) {
            (Some(v), _) => precisions.push(v),
            (None, UndefinedPrecision::Exclude) => excluded_p += 1,
            (None, UndefinedPrecision::ImputeZero) => precisions.push(0.0),
            (None, UndefinedPrecision::ImputeOne) => precisions.push(1.0),
        }
        match rc {
            Some(v) => recalls.push(v),
            None => excluded_r += 1,
        }
        scans.push(ScanSummary {
            scan_id: r.scan_id.clone(),
            group: r.group.clone(),
            counts: c,
            n_pred_removed: r.n_pred_removed,
            precision: p,
            recall: rc,
        });
    }
    let total: DetectionCounts = scans.iter().map(|s| s.counts).sum();
    Ok(MetricsReport {
        schema_version: REPORT_SCHEMA_VERSION,
        size_threshold: None,
        undefined_precision: mode,
        n_scans: scans.len(),
        n_gt: total.n_gt,
        n_tp: total.n_tp,
        n_fp: total.n_fp,
        n_fn: total.n_fn,
        n_pred_removed: scans.iter().map(|s| s.n_pred_removed).sum(),
        precision: total.precision(),
        recall: total.recall(),
        patient_level: PatientLevel {
            precision: DistributionStats::from_values(&precisions),
            recall: DistributionStats::from_values(&recalls),
        },
        n_scans_excluded_from_precision: excluded_p,
        n_scans_excluded_from_recall: excluded_r,
        scans,
        failed_scans: Vec::new(),
    })
}

/// Round half up to `decimals` places. A 1e-9 nudge keeps exact halves such
/// as 12.25 from landing below the midpoint after binary rounding.
pub fn round_half_up(value: f64, decimals: i32) -> f64 {
    let scale = 10f64.powi(decimals);
    ((value * scale) + 0.5 + 1e-9).floor() / scale
}

/// A ratio as a percentage with one decimal, e.g. `0.6242` -> `"62.4%"`.
pub fn format_percent(ratio: Option<f64>) -> String {
    match ratio {
        Some(r) => format!("{:.1}%", round_half_up(r * 100.0, 1)),
        None => "n/a".to_string(),
    }
}

pub const TABLE1_HEADER: &str = "Size Threshold (in voxels) & # ground-truth & # TP & # FP & # FN & Precision & Recall";
pub const TABLE2_HEADER: &str = "Metric & Mean & Std. Dev. & Median & IQR";

fn table2_row(name: &str, s: Option<&DistributionStats>) -> String {
    match s {
        Some(s) => format!(
            "{name} & {} & {} & {} & {} - {}",
            format_percent(Some(s.mean)),
            format_percent(Some(s.std_dev)),
            format_percent(Some(s.median)),
            format_percent(Some(s.iqr_lo)),
            format_percent(Some(s.iqr_hi)),
        ),
        None => format!("{name} & n/a & n/a & n/a & n/a"),
    }
}

impl MetricsReport {
    pub fn with_threshold(mut self, t: SizeThreshold) -> Self {
        self.size_threshold = Some(t);
        self
    }

    pub fn counts(&self) -> DetectionCounts {
        DetectionCounts {
            n_gt: self.n_gt,
            n_tp: self.n_tp,
            n_fp: self.n_fp,
            n_fn: self.n_fn,
        }
    }

    /// `threshold & GT & TP & FP & FN & precision & recall`.
    pub fn table1_row(&self) -> String {
        let t = self.size_threshold.map_or_else(|| "-".to_string(), |t| t.to_string());
        format!(
            "{t} & {} & {} & {} & {} & {} & {}",
            self.n_gt,
            self.n_tp,
            self.n_fp,
            self.n_fn,
            format_percent(self.precision),
            format_percent(self.recall)
        )
    }

    /// Patient-level precision and recall rows.
    pub fn table2_rows(&self) -> [String; 2] {
        [
            table2_row("Precision", self.patient_level.precision.as_ref()),
            table2_row("Recall", self.patient_level.recall.as_ref()),
        ]
    }

    pub fn to_text(&self) -> String {
        let [p, r] = self.table2_rows();
        let mut out = format!("{TABLE1_HEADER}\n{}\n\n{TABLE2_HEADER}\n{p}\n{r}\n", self.table1_row());
        if self.n_scans_excluded_from_precision > 0 || self.n_scans_excluded_from_recall > 0 {
            out.push_str(&format!(
                "\nscans excluded from patient-level precision: {}; from recall: {}\n",
                self.n_scans_excluded_from_precision, self.n_scans_excluded_from_recall
            ));
        }
        if !self.failed_scans.is_empty() {
            out.push_str(&format!("\nfailed scans: {}\n", self.failed_scans.len()));
            for f in &self.failed_scans {
                out.push_str(&format!("  {}: {}\n", f.scan_id, f.error));
            }
        }
        out
    }
}

/// LaTeX-style table rows for several reports (e.g. a threshold sweep).
pub fn format_table1(reports: &[MetricsReport]) -> String {
    let mut out = String::from(TABLE1_HEADER);
    for r in reports {
        out.push('\n');
        out.push_str(&r.table1_row());
    }
    out.push('\n');
    out
}

/// Text table path written next to a JSON report.
pub fn text_path_for(json_path: &Path) -> PathBuf {
    json_path.with_extension("txt")
}

/// Write the report as JSON at `path` and as a text table next to it.
pub fn write_report(report: &MetricsReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if report.n_scans == 0 {
        return Err(Error::Empty("no scans"));
    }
    let mut json = serde_json::to_string_pretty(report)?;
    json.push('\n');
    std::fs::write(path, json).map_err(|e| Error::io(path, e))?;
    let txt = text_path_for(path);
    std::fs::write(&txt, report.to_text()).map_err(|e| Error::io(txt, e))?;
    Ok(())
}

pub fn read_report(path: impl AsRef<Path>) -> Result<MetricsReport> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
