use std::path::{Path, PathBuf};

use clap::Args;
use sdstereo_core::eval;
use sdstereo_core::imageio::{read_pfm, read_png_gray};

use crate::errors::{CliError, CliResult};
use crate::overlay::Overlay;

const KEYS: &[&str] = &["t-e", "grid"];

/// Sparsification curve of a prediction against ground truth under a score
/// map (lower score = more confident).
#[derive(Args, Debug)]
pub struct SparsifyArgs {
    /// Predicted disparity (PFM)
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground-truth disparity (PFM)
    #[arg(long)]
    pub gt: PathBuf,
    /// Score map: PFM, or a PNG such as the p_out output of infer
    #[arg(long)]
    pub score: PathBuf,
    /// Output curve CSV (rho_d, f_pi)
    #[arg(long)]
    pub out: PathBuf,
    /// Error threshold defining outliers, in pixels
    #[arg(long)]
    pub t_e: Option<f64>,
    /// Number of density grid points
    #[arg(long)]
    pub grid: Option<usize>,
    /// Also write an SVG plot here
    #[arg(long)]
    pub svg: Option<PathBuf>,
    /// Config file with `key = value` lines; flags win
    #[arg(long)]
    pub config: Option<PathBuf>,
}

fn read_score(path: &Path, w: usize, h: usize) -> CliResult<Vec<f64>> {
    let is_png = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.eq_ignore_ascii_case("png"))
        .unwrap_or(false);
    let (sw, sh, data): (usize, usize, Vec<f64>) = if is_png {
        let img = read_png_gray(path)?;
        (img.width(), img.height(), img.data().to_vec())
    } else {
        let map = read_pfm(path)?;
        (
            map.width(),
            map.height(),
            map.disparity().iter().map(|&v| v as f64).collect(),
        )
    };
    if (sw, sh) != (w, h) {
        return Err(CliError::Config(format!(
            "score map is {sw}x{sh} but the prediction is {w}x{h}"
        )));
    }
    Ok(data)
}

pub fn run(args: SparsifyArgs) -> CliResult<()> {
    let overlay = Overlay::load(args.config.as_deref(), KEYS)?;
    let t_e = overlay.resolve(args.t_e, "t-e", 0.2)?;
    let grid = overlay.resolve(args.grid, "grid", 100usize)?;
    if t_e <= 0.0 {
        return Err(CliError::Config(format!("t-e must be positive, got {t_e}")));
    }
    if grid < 2 {
        return Err(CliError::Config("grid needs at least 2 points".into()));
    }

    let pred = read_pfm(&args.pred)?;
    let gt = read_pfm(&args.gt)?;
    if pred.width() != gt.width() || pred.height() != gt.height() {
        return Err(CliError::Config(format!(
            "prediction is {}x{} but ground truth is {}x{}",
            pred.width(),
            pred.height(),
            gt.width(),
            gt.height()
        )));
    }
    let score = read_score(&args.score, pred.width(), pred.height())?;

    let mut errs = Vec::new();
    let mut scores = Vec::new();
    for i in 0..pred.len() {
        if pred.valid()[i] && gt.valid()[i] {
            errs.push((pred.disparity()[i] as f64 - gt.disparity()[i] as f64).abs());
            scores.push(score[i]);
        }
    }
    if errs.is_empty() {
        return Err(CliError::Config(
            "no pixel is valid in both prediction and ground truth".into(),
        ));
    }
    let curve = eval::sparsification(&errs, &scores, t_e, grid);
    eval::write_curve_csv(&curve, &args.out)?;
    if let Some(svg_path) = &args.svg {
        let svg = eval::svg_curves(&[("score", &curve)], &format!("sparsification, t_e = {t_e}px"));
        std::fs::write(svg_path, svg)?;
    }
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
    println!(
        "pixels {}, rho_out {:.4}, auc {:.5}, auc_opt {:.5}, auc_rand {:.5}, aro {}, rir {}, rto {}",
        errs.len(),
        curve.rho_out,
        curve.auc,
        curve.auc_opt,
        curve.auc_rand,
        fmt(curve.aro),
        fmt(curve.rir),
        fmt(curve.rto),
    );
    Ok(())
}
