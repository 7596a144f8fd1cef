use std::path::PathBuf;

use clap::Args;
use sdstereo_core::imageio::{read_png_gray, write_pfm};
use sdstereo_core::matcher::{self, MatchConfig};

use crate::errors::{CliError, CliResult};
use crate::overlay::Overlay;

const KEYS: &[&str] = &["dmax", "k", "radius", "levels", "half-range"];

/// Run the coarse-to-fine ZNCC matcher on a rectified pair.
#[derive(Args, Debug)]
pub struct MatchArgs {
    /// Left frame (grayscale PNG)
    #[arg(long)]
    pub left: PathBuf,
    /// Right frame (grayscale PNG)
    #[arg(long)]
    pub right: PathBuf,
    /// Maximum disparity in pixels
    #[arg(long)]
    pub dmax: Option<usize>,
    /// Output raw disparity map (PFM)
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the truncated cost volume (SDCV0001 file)
    #[arg(long)]
    pub cv_out: Option<PathBuf>,
    /// Cost-volume half-width K (2K+1 slices)
    #[arg(long)]
    pub k: Option<usize>,
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

pub fn run(args: MatchArgs) -> CliResult<()> {
    let overlay = Overlay::load(args.config.as_deref(), KEYS)?;
    let d = MatchConfig::default();
    let cfg = MatchConfig {
        radius: overlay.resolve(args.radius, "radius", d.radius)?,
        levels: overlay.resolve(args.levels, "levels", d.levels)?,
        half_range: overlay.resolve(args.half_range, "half-range", d.half_range)?,
        d_max: overlay.resolve(args.dmax, "dmax", d.d_max)?,
        ..d
    };
    cfg.validate().map_err(CliError::from)?;
    let k = overlay.resolve(args.k, "k", 3usize)?;

    let left = read_png_gray(&args.left)?;
    let right = read_png_gray(&args.right)?;
    let raw = matcher::match_hierarchical(&left, &right, &cfg)?;
    write_pfm(&raw, &args.out)?;
    if let Some(cv_path) = &args.cv_out {
        let cv = matcher::truncate_volume(&left, &right, &raw, k, cfg.radius, cfg.d_max, cfg.eps);
        matcher::write_cost_volume(&cv, cv_path)?;
    }
    println!(
        "matched {}x{}: {} of {} pixels valid",
        left.width(),
        left.height(),
        raw.n_valid(),
        raw.len()
    );
    Ok(())
}
