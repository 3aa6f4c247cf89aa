use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ppgl_core::evaluation::{LesionSelector, UndefinedPrecision};
use ppgl_core::morphology::{Connectivity, SizeThreshold};
use serde::{Deserialize, Serialize};

/// Settings shared by all subcommands. Read from `--config`, overridden by
/// flags, and echoed fully resolved into the output root as
/// `run-config.json`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ct_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub annotations: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub body_masks_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gt_masks_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pred_masks_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold: Option<SizeThreshold>,
    /// Voxel thresholds evaluated in one pass; replaces `threshold`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<Vec<u64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub connectivity: Option<Connectivity>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gt_lesion_label: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pred_lesion: Option<LesionSelector>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub extent_each_side: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub undefined_precision: Option<UndefinedPrecision>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub body_fallback: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub body_hu_threshold: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
}

macro_rules! take_over {
    ($base:ident, $over:ident; $($f:ident),*) => {
        $( if $over.$f.is_some() { $base.$f = $over.$f; } )*
    };
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Fields set in `flags` replace those in `self`.
    pub fn merged(mut self, flags: RunConfig) -> Self {
        take_over!(self, flags; ct_dir, annotations, body_masks_dir, gt_masks_dir, pred_masks_dir, out,
            threshold, sweep, connectivity, gt_lesion_label, pred_lesion, extent_each_side,
            undefined_precision, body_fallback, body_hu_threshold, workers);
        self
    }

    pub fn workers(&self) -> usize {
        self.workers
            .filter(|&w| w > 0)
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
    }

    pub fn out(&self) -> Result<&Path> {
        self.out.as_deref().context("an output directory is required (--out or \"out\" in the config)")
    }

    /// Write the resolved config to `<out>/run-config.json`.
    pub fn echo(&self) -> Result<()> {
        let out = self.out()?;
        std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        let path = out.join("run-config.json");
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        std::fs::write(&path, json).with_context(|| format!("writing {}", path.display()))
    }
}

/// Fail before any work starts when a required input is missing.
pub fn require_path<'a>(p: &'a Option<PathBuf>, what: &str, flag: &str) -> Result<&'a Path> {
    let Some(p) = p.as_deref() else {
        bail!("{what} is required ({flag})");
    };
    if !p.exists() {
        bail!("{what} {} does not exist", p.display());
    }
    Ok(p)
}
