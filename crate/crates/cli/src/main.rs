mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ppgl_core::evaluation::{LesionSelector, UndefinedPrecision};
use ppgl_core::morphology::{Connectivity, SizeThreshold};

use crate::config::RunConfig;

#[derive(Parser)]
#[command(name = "ppgl", version, about = "Weak ground truth, lesion components and detection metrics for CT scans")]
struct Cli {
    /// JSON run configuration. Flags given on the command line take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build slab ground-truth masks from box annotations.
    MakeGt(MakeGtArgs),
    /// Match predicted against ground-truth lesions and write metric reports.
    Evaluate(EvaluateArgs),
    /// Generate a synthetic dataset with known detection outcomes.
    Phantom(PhantomArgs),
    /// Render a windowed axial slice, optionally with mask overlays.
    Render(RenderArgs),
    /// List connected components of label masks.
    Components(ComponentsArgs),
}

#[derive(Args)]
struct MakeGtArgs {
    /// Directory of CT volumes, one `<scan_id>.nii[.gz]` per scan.
    #[arg(long = "ct")]
    ct_dir: Option<PathBuf>,
    /// Annotation CSV (or JSON array).
    #[arg(long)]
    annotations: Option<PathBuf>,
    /// Directory of body-region masks named by scan id.
    #[arg(long = "body-masks")]
    body_masks_dir: Option<PathBuf>,
    /// Derive a body region from the CT when a scan has no body mask.
    #[arg(long)]
    body_fallback: bool,
    /// HU threshold of the body fallback.
    #[arg(long, allow_hyphen_values = true)]
    body_hu_threshold: Option<f64>,
    /// Slices added above and below each annotated slice.
    #[arg(long = "extent")]
    extent_each_side: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long = "gt-masks")]
    gt_masks_dir: Option<PathBuf>,
    #[arg(long = "pred-masks")]
    pred_masks_dir: Option<PathBuf>,
    /// Minimum predicted component size in voxels (inclusive).
    #[arg(long, conflicts_with = "threshold_mm3")]
    threshold: Option<u64>,
    /// Minimum predicted component volume in mm³ (inclusive).
    #[arg(long)]
    threshold_mm3: Option<f64>,
    /// Comma-separated voxel thresholds, one report each.
    #[arg(long, value_delimiter = ',', conflicts_with_all = ["threshold", "threshold_mm3"])]
    sweep: Option<Vec<u64>>,
    /// 6 or 26.
    #[arg(long)]
    connectivity: Option<Connectivity>,
    /// Lesion label of the ground-truth masks.
    #[arg(long)]
    gt_label: Option<u32>,
    /// Lesion label of the prediction masks, or `nonbody` for any label other than 0 and 1.
    #[arg(long)]
    pred_label: Option<LesionSelector>,
    /// Scans without retained predictions in patient-level precision: exclude, impute-zero or impute-one.
    #[arg(long)]
    undefined_precision: Option<UndefinedPrecision>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PhantomArgs {
    /// Suite, scan or phantom spec (JSON). Defaults to a random suite.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Number of scans. Random suites default to 10; explicit specs are
    /// generated as written unless a count is given.
    #[arg(long)]
    count: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    ct: PathBuf,
    #[arg(long)]
    slice: usize,
    #[arg(long, default_value_t = ppgl_core::render::DEFAULT_WINDOW_CENTER, allow_hyphen_values = true)]
    center: f64,
    #[arg(long, default_value_t = ppgl_core::render::DEFAULT_WINDOW_WIDTH)]
    width: f64,
    /// Ground-truth mask drawn in yellow.
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Predicted mask drawn in blue.
    #[arg(long)]
    pred: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    gt_label: u32,
    #[arg(long, default_value_t = 2)]
    pred_label: u32,
    /// Output PNG path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ComponentsArgs {
    /// A mask file or a directory of masks.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 2)]
    label: u32,
    #[arg(long)]
    connectivity: Option<Connectivity>,
    /// Drop components below this many voxels.
    #[arg(long)]
    threshold: Option<u64>,
    /// Nearest-rank percentiles of the pooled component sizes.
    #[arg(long, value_delimiter = ',')]
    percentile: Vec<f64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    let base = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::MakeGt(a) => {
            let cfg = base.merged(RunConfig {
                ct_dir: a.ct_dir,
                annotations: a.annotations,
                body_masks_dir: a.body_masks_dir,
                body_fallback: a.body_fallback.then_some(true),
                body_hu_threshold: a.body_hu_threshold,
                extent_each_side: a.extent_each_side,
                workers: a.workers,
                out: a.out,
                ..Default::default()
            });
            commands::make_gt(cfg)
        }
        Command::Evaluate(a) => {
            let threshold = match (a.threshold, a.threshold_mm3) {
                (Some(v), _) => Some(SizeThreshold::voxels(v)),
                (None, Some(mm3)) => Some(SizeThreshold::MinVolumeMm3(mm3)),
                (None, None) => None,
            };
            let cfg = base.merged(RunConfig {
                gt_masks_dir: a.gt_masks_dir,
                pred_masks_dir: a.pred_masks_dir,
                threshold,
                sweep: a.sweep,
                connectivity: a.connectivity,
                gt_lesion_label: a.gt_label,
                pred_lesion: a.pred_label,
                undefined_precision: a.undefined_precision,
                workers: a.workers,
                out: a.out,
                ..Default::default()
            });
            commands::evaluate(cfg)
        }
        Command::Phantom(a) => {
            let cfg = base.merged(RunConfig {
                workers: a.workers,
                out: a.out,
                ..Default::default()
            });
            commands::phantom(cfg, a.spec.as_deref(), a.count, a.seed)
        }
        Command::Render(a) => commands::render(&commands::RenderRequest {
            ct: a.ct,
            slice: a.slice,
            center: a.center,
            width: a.width,
            gt: a.gt,
            pred: a.pred,
            gt_label: a.gt_label,
            pred_label: a.pred_label,
            out: a.out,
        }),
        Command::Components(a) => {
            let cfg = base.merged(RunConfig {
                connectivity: a.connectivity,
                threshold: a.threshold.map(SizeThreshold::voxels),
                workers: a.workers,
                out: a.out,
                ..Default::default()
            });
            commands::components(cfg, &a.input, a.label, &a.percentile)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
