use std::path::PathBuf;

use clap::Args;
use sdstereo_core::checkpoint::load_checkpoint;
use sdstereo_core::imageio::{read_png_gray, write_pfm, write_png_gray, DisparityMap, GrayImage};
use sdstereo_core::matcher::{self, MatchConfig};
use sdstereo_core::refiner::{self, Mode, RefinerInput};
use sdstereo_core::Tensor;

use crate::errors::{CliError, CliResult};
use crate::overlay::Overlay;

const KEYS: &[&str] = &["dmax", "radius", "levels", "half-range", "threshold", "seed"];

/// Match a pair and refine it with a trained checkpoint (single mean pass).
#[derive(Args, Debug)]
pub struct InferArgs {
    /// Trained checkpoint
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Left frame (grayscale PNG)
    #[arg(long)]
    pub left: PathBuf,
    /// Right frame (grayscale PNG)
    #[arg(long)]
    pub right: PathBuf,
    /// Output refined disparity (PFM)
    #[arg(long)]
    pub out: PathBuf,
    /// Output outlier probability map (16-bit PNG)
    #[arg(long)]
    pub pout_out: PathBuf,
    /// Monte-Carlo samples for an epistemic std map (needs >= 2)
    #[arg(long)]
    pub mc: Option<usize>,
    /// Output path for the Monte-Carlo std map (PFM)
    #[arg(long)]
    pub std_out: Option<PathBuf>,
    /// Maximum disparity in pixels (default: the checkpoint's normalizer)
    #[arg(long)]
    pub dmax: Option<usize>,
    /// Validated-pixel threshold on p_out, for the printed summary
    #[arg(long)]
    pub threshold: Option<f64>,
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

/// Snap a threshold onto the 16-bit quantization grid so comparisons against
/// PNG-decoded probabilities keep boundary pixels validated.
pub fn snap_threshold_16(tau: f64) -> f64 {
    (tau * 65535.0).round() / 65535.0
}

pub fn run(args: InferArgs) -> CliResult<()> {
    if let Some(mc) = args.mc {
        if mc < 2 {
            return Err(CliError::Config(format!(
                "--mc needs at least 2 samples, got {mc}"
            )));
        }
    }
    let overlay = Overlay::load(args.config.as_deref(), KEYS)?;
    let ckpt = load_checkpoint(&args.ckpt)?;
    let left = read_png_gray(&args.left)?;
    let right = read_png_gray(&args.right)?;

    let dm = MatchConfig::default();
    let cfg = MatchConfig {
        radius: overlay.resolve(args.radius, "radius", dm.radius)?,
        levels: overlay.resolve(args.levels, "levels", dm.levels)?,
        half_range: overlay.resolve(args.half_range, "half-range", dm.half_range)?,
        d_max: overlay.resolve(args.dmax, "dmax", ckpt.params.desc.d_norm.ceil() as usize)?,
        ..dm
    };
    cfg.validate().map_err(CliError::from)?;
    let threshold = overlay.resolve(args.threshold, "threshold", 0.05)?;
    let seed = overlay.resolve(args.seed, "seed", 0)?;

    let raw = matcher::match_hierarchical(&left, &right, &cfg)?;
    let k = ckpt.params.desc.k;
    let cv = matcher::truncate_volume(&left, &right, &raw, k, cfg.radius, cfg.d_max, cfg.eps);
    let input = RefinerInput::new(&raw, &cv);
    let out = refiner::forward(&input, &ckpt.params, &mut Mode::Mean)?;
    let pred = refiner::predict_disparity(&raw, &out);
    write_pfm(&pred, &args.out)?;

    // p_out as 16-bit grayscale: round(p * 65535)
    let pout_img = GrayImage::from_vec(
        raw.width(),
        raw.height(),
        out.p_out.data().to_vec(),
    );
    write_png_gray(&pout_img, &args.pout_out, 16)?;

    if let Some(mc) = args.mc {
        let (_, std, _) = refiner::mc_predict(&input, &ckpt.params, mc, seed)?;
        let std_path = args.std_out.clone().unwrap_or_else(|| {
            let stem = args.out.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
            args.out.with_file_name(format!("{stem}.std.pfm"))
        });
        let std_map = DisparityMap::from_parts(
            raw.width(),
            raw.height(),
            std.data().iter().map(|&v| v as f32).collect(),
            raw.valid().to_vec(),
        );
        write_pfm(&std_map, &std_path)?;
    }

    // summary over the quantized map, thresholded on the same grid
    let snapped = snap_threshold_16(threshold);
    let quantized: Tensor = out.p_out.map(|p| (p * 65535.0).round() / 65535.0);
    let n_valid = raw.n_valid();
    let n_validated = quantized
        .iter()
        .zip(raw.valid())
        .filter(|&(&p, &v)| v && p <= snapped)
        .count();
    println!(
        "refined {}x{}: {} valid, {} validated at p_out <= {threshold}",
        raw.width(),
        raw.height(),
        n_valid,
        n_validated
    );
    Ok(())
}
