use std::path::PathBuf;

use clap::Args;
use sdstereo_core::checkpoint::load_checkpoint;
use sdstereo_core::datagen::read_manifest;
use sdstereo_core::eval::{self, EvalOptions};
use sdstereo_core::matcher::MatchConfig;
use sdstereo_core::trainer;

use crate::errors::{CliError, CliResult};
use crate::overlay::Overlay;

const KEYS: &[&str] = &[
    "threshold", "t-e", "t-e-secondary", "mc", "seed", "radius", "levels", "half-range",
];

/// Evaluate a checkpoint on a dataset: validated-pixel metrics and
/// sparsification curves.
#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Trained checkpoint
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Dataset manifest with ground truth
    #[arg(long)]
    pub data: PathBuf,
    /// Directory for the CSV (and optional SVG) reports
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Validated-pixel threshold on p_out
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Sparsification error threshold in pixels
    #[arg(long)]
    pub t_e: Option<f64>,
    /// Secondary error threshold in pixels
    #[arg(long)]
    pub t_e_secondary: Option<f64>,
    /// Monte-Carlo samples for the epistemic score (0 disables)
    #[arg(long)]
    pub mc: Option<usize>,
    /// Also write SVG plots
    #[arg(long)]
    pub svg: bool,
    /// Seed for the Monte-Carlo passes
    #[arg(long)]
    pub seed: Option<u64>,
    /// Correlation window radius in pixels
    #[arg(long)]
    pub radius: Option<usize>,
    /// Pyramid levels
    #[arg(long)]
    pub levels: Option<usize>,
    /// Search half-range around the coarse estimate, in pixels
    #[arg(long)]
    pub half_range: Option<usize>,
    /// Config file with `key = value` lines; flags win
    #[arg(long)]
    pub config: Option<PathBuf>,
}

pub fn run(args: EvalArgs) -> CliResult<()> {
    let overlay = Overlay::load(args.config.as_deref(), KEYS)?;
    let ckpt = load_checkpoint(&args.ckpt)?;
    let manifest = read_manifest(&args.data)?;
    if manifest.entries.is_empty() {
        return Err(CliError::Config("dataset manifest is empty".into()));
    }
    let dm = MatchConfig::default();
    let match_cfg = MatchConfig {
        radius: overlay.resolve(args.radius, "radius", dm.radius)?,
        levels: overlay.resolve(args.levels, "levels", dm.levels)?,
        half_range: overlay.resolve(args.half_range, "half-range", dm.half_range)?,
        ..dm
    };
    let dopt = EvalOptions::default();
    let opts = EvalOptions {
        threshold: overlay.resolve(args.threshold, "threshold", dopt.threshold)?,
        t_e: overlay.resolve(args.t_e, "t-e", dopt.t_e)?,
        t_e_secondary: overlay.resolve(args.t_e_secondary, "t-e-secondary", dopt.t_e_secondary)?,
        mc_samples: overlay.resolve(args.mc, "mc", dopt.mc_samples)?,
        seed: overlay.resolve(args.seed, "seed", 0)?,
        ..dopt
    };

    std::fs::create_dir_all(&args.out_dir)?;
    let samples = trainer::prepare_dataset(&manifest, &match_cfg, ckpt.params.desc.k)?;
    let ids: Vec<String> = manifest.entries.iter().map(|e| e.id.clone()).collect();
    let outcome = eval::evaluate(&ckpt, &samples, &ids, &opts)?;

    eval::write_report_csv(&outcome, args.out_dir.join("report.csv"))?;
    for cs in &outcome.aggregate_curves {
        let tag = format!("te{}", cs.t_e);
        eval::write_curve_csv(&cs.cls, args.out_dir.join(format!("curve_cls_{tag}.csv")))?;
        if let Some(c) = &cs.bayes {
            eval::write_curve_csv(c, args.out_dir.join(format!("curve_bayes_{tag}.csv")))?;
        }
        if let Some(c) = &cs.total {
            eval::write_curve_csv(c, args.out_dir.join(format!("curve_total_{tag}.csv")))?;
        }
        if args.svg {
            let mut series: Vec<(&str, &eval::SparsificationCurve)> = vec![("p_out", &cs.cls)];
            if let Some(c) = &cs.bayes {
                series.push(("epistemic", c));
            }
            if let Some(c) = &cs.total {
                series.push(("total", c));
            }
            let svg = eval::svg_curves(&series, &format!("sparsification, t_e = {}px", cs.t_e));
            std::fs::write(args.out_dir.join(format!("sparsification_{tag}.svg")), svg)?;
        }
    }
    if args.svg {
        let fractions: Vec<f64> = outcome
            .per_image
            .iter()
            .map(|img| img.report.inlier_fraction)
            .collect();
        let svg = eval::svg_histogram(&fractions, 20, "per-image inlier fraction");
        std::fs::write(args.out_dir.join("inlier_hist.svg"), svg)?;
    }

    let agg = &outcome.aggregate;
    println!(
        "aggregate over {} images: inlier fraction {:.3}, mae validated {}, mae all {}, raw mae on validated {}",
        outcome.per_image.len(),
        agg.inlier_fraction,
        agg.mae_validated.map(|v| format!("{v:.4}px")).unwrap_or_else(|| "-".into()),
        agg.mae_all.map(|v| format!("{v:.4}px")).unwrap_or_else(|| "-".into()),
        agg.raw_mae_validated.map(|v| format!("{v:.4}px")).unwrap_or_else(|| "-".into()),
    );
    Ok(())
}
