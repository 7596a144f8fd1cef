//! Evaluation: validated-pixel metrics, sparsification (ROC) analysis with
//! its closed-form reference curves, and the executable down-weighting
//! guarantee check.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

use crate::bayes;
use crate::checkpoint::Checkpoint;
use crate::imageio::DisparityMap;
use crate::refiner::{self, Mode, RefinerInput};
use crate::rng::stream_rng;
use crate::tensor::Tensor;
use crate::trainer::{PreparedSample, TrainError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid eval config: {0}")]
    Config(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Refiner(#[from] refiner::RefinerError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Validated-pixel selection: p_out at or below the threshold, restricted to
/// pixels that are valid to begin with.
pub fn validated_mask(p_out: &Tensor, threshold: f64, input_valid: &[bool]) -> Vec<bool> {
    assert_eq!(p_out.len(), input_valid.len());
    p_out
        .iter()
        .zip(input_valid)
        .map(|(&p, &v)| v && p <= threshold)
        .collect()
}

/// Mean absolute error over masked pixels; None when the mask is empty.
pub fn mae(pred: &DisparityMap, gt: &DisparityMap, mask: &[bool]) -> Option<f64> {
    assert_eq!(pred.len(), mask.len());
    assert_eq!(gt.len(), mask.len());
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..mask.len() {
        if mask[i] {
            sum += (pred.disparity()[i] as f64 - gt.disparity()[i] as f64).abs();
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// Validated-pixel accuracy summary for one image or an aggregate.
#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub mae_validated: Option<f64>,
    pub mae_all: Option<f64>,
    /// Raw-disparity MAE on the same validated set (the no-refinement bar).
    pub raw_mae_validated: Option<f64>,
    pub inlier_fraction: f64,
    pub n_validated: usize,
    pub n_total: usize,
}

/// False-positive-rate-of-inliers curve over retained density, with its
/// closed-form optimal and random references.
#[derive(Debug, Clone)]
pub struct SparsificationCurve {
    pub densities: Vec<f64>,
    pub f_pi: Vec<f64>,
    pub auc: f64,
    pub auc_opt: f64,
    pub auc_rand: f64,
    pub aro: Option<f64>,
    pub rir: Option<f64>,
    pub rto: Option<f64>,
    pub t_e: f64,
    pub rho_out: f64,
}

/// Closed-form perfect-classifier curve at density rho_d.
pub fn f_pi_opt(rho_d: f64, rho_out: f64) -> f64 {
    if rho_d < 1.0 - rho_out {
        0.0
    } else {
        (rho_d - (1.0 - rho_out)) / rho_d
    }
}

fn trapezoid(xs: &[f64], ys: &[f64]) -> f64 {
    let mut area = 0.0;
    for i in 1..xs.len() {
        area += 0.5 * (ys[i] + ys[i - 1]) * (xs[i] - xs[i - 1]);
    }
    area
}

/// Sparsification analysis of |pred - gt| under a confidence score (lower
/// score = keep first). Ties at the quantile cut break by pixel index.
pub fn sparsification(
    abs_err: &[f64],
    score: &[f64],
    t_e: f64,
    n_grid: usize,
) -> SparsificationCurve {
    assert_eq!(abs_err.len(), score.len());
    assert!(!abs_err.is_empty(), "sparsification needs at least one pixel");
    assert!(t_e > 0.0 && n_grid >= 2);
    let n = abs_err.len();

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| score[a].total_cmp(&score[b]).then(a.cmp(&b)));

    // prefix outlier counts in keep order
    let mut prefix = Vec::with_capacity(n + 1);
    prefix.push(0usize);
    for &i in &order {
        prefix.push(prefix.last().unwrap() + usize::from(abs_err[i] > t_e));
    }
    let n_out = *prefix.last().unwrap();
    let rho_out = n_out as f64 / n as f64;

    let mut densities = Vec::with_capacity(n_grid);
    let mut f_pi = Vec::with_capacity(n_grid);
    let mut f_opt = Vec::with_capacity(n_grid);
    for g in 1..=n_grid {
        let rho = g as f64 / n_grid as f64;
        let n_sel = ((rho * n as f64).round() as usize).clamp(1, n);
        densities.push(rho);
        f_pi.push(prefix[n_sel] as f64 / n_sel as f64);
        f_opt.push(f_pi_opt(rho, rho_out));
    }
    let auc = trapezoid(&densities, &f_pi);
    let auc_opt = trapezoid(&densities, &f_opt);
    let auc_rand = rho_out;

    let aro = (auc != 0.0).then(|| auc_opt / auc);
    let rir = (auc_rand != 0.0).then(|| (auc_rand - auc) / auc_rand);
    let rto = (auc_rand - auc_opt != 0.0).then(|| (auc_rand - auc) / (auc_rand - auc_opt));
    SparsificationCurve {
        densities,
        f_pi,
        auc,
        auc_opt,
        auc_rand,
        aro,
        rir,
        rto,
        t_e,
        rho_out,
    }
}

/// Finite instance of the down-weighting guarantee: candidate predictors
/// scored on a point set with an outlier labeling and a down-weight alpha.
#[derive(Debug, Clone)]
pub struct TheoryInstance {
    /// Target value per point.
    pub targets: Vec<f64>,
    /// Candidate predictions, one value vector per candidate.
    pub candidates: Vec<Vec<f64>>,
    /// Outlier indicator per point.
    pub outlier: Vec<bool>,
    /// Down-weight applied to outlier points, in (0, 1).
    pub alpha: f64,
}

#[derive(Debug, Clone)]
pub struct TheoryVerdict {
    /// argmin of the unweighted squared error.
    pub unweighted: usize,
    /// argmin of the outlier-down-weighted squared error.
    pub weighted: usize,
    pub inlier_loss_unweighted: f64,
    pub inlier_loss_weighted: f64,
    /// Whether the weighted minimizer is at least as good on the inliers.
    pub holds: bool,
}

/// Exhaustively minimize both objectives and compare inlier losses: the
/// weighted minimizer must do at least as well on the inlier points.
pub fn theory_check(inst: &TheoryInstance) -> TheoryVerdict {
    assert!(inst.candidates.len() >= 2, "need at least two candidates");
    assert!(inst.outlier.iter().any(|&o| !o), "need at least one inlier point");
    assert!(inst.alpha > 0.0 && inst.alpha < 1.0);
    let n = inst.targets.len();
    let losses = |vals: &[f64]| -> (f64, f64, f64) {
        let mut total = 0.0;
        let mut weighted = 0.0;
        let mut inlier = 0.0;
        for i in 0..n {
            let d = (vals[i] - inst.targets[i]).powi(2);
            total += d;
            weighted += if inst.outlier[i] { inst.alpha * d } else { d };
            if !inst.outlier[i] {
                inlier += d;
            }
        }
        (total, weighted, inlier)
    };
    let mut best_total = (f64::INFINITY, 0usize);
    let mut best_weighted = (f64::INFINITY, 0usize);
    let mut inlier_losses = Vec::with_capacity(inst.candidates.len());
    for (ci, cand) in inst.candidates.iter().enumerate() {
        assert_eq!(cand.len(), n);
        let (total, weighted, inlier) = losses(cand);
        if total < best_total.0 {
            best_total = (total, ci);
        }
        if weighted < best_weighted.0 {
            best_weighted = (weighted, ci);
        }
        inlier_losses.push(inlier);
    }
    let ia = inlier_losses[best_total.1];
    let is = inlier_losses[best_weighted.1];
    TheoryVerdict {
        unweighted: best_total.1,
        weighted: best_weighted.1,
        inlier_loss_unweighted: ia,
        inlier_loss_weighted: is,
        holds: is <= ia + 1e-12 * (1.0 + ia.abs()),
    }
}

/// Random instance for the sweep: up to 6 points, up to 8 candidates, at
/// least one inlier.
pub fn random_theory_instance(rng: &mut ChaCha8Rng) -> TheoryInstance {
    let n = rng.random_range(1..=6);
    let m = rng.random_range(2..=8);
    let targets: Vec<f64> = (0..n).map(|_| 4.0 * rng.random::<f64>() - 2.0).collect();
    let candidates = (0..m)
        .map(|_| (0..n).map(|_| 4.0 * rng.random::<f64>() - 2.0).collect())
        .collect();
    let mut outlier: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < 0.4).collect();
    if outlier.iter().all(|&o| o) {
        let i = rng.random_range(0..n);
        outlier[i] = false;
    }
    let alpha = 0.01 + 0.98 * rng.random::<f64>();
    TheoryInstance { targets, candidates, outlier, alpha }
}

/// Run `n` random instances; returns the number of violated verdicts.
pub fn theory_sweep(n: usize, seed: u64) -> usize {
    let mut rng = stream_rng(seed, 0x7e01);
    (0..n)
        .filter(|_| !theory_check(&random_theory_instance(&mut rng)).holds)
        .count()
}

/// Evaluation options.
#[derive(Debug, Clone)]
pub struct EvalOptions {
    /// Validated-pixel threshold on p_out.
    pub threshold: f64,
    /// Primary sparsification error threshold, in pixels.
    pub t_e: f64,
    /// Secondary error threshold, in pixels.
    pub t_e_secondary: f64,
    /// Monte-Carlo samples for the epistemic score; 0 skips those curves.
    pub mc_samples: usize,
    pub grid: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            threshold: 0.05,
            t_e: 0.2,
            t_e_secondary: 1.0,
            mc_samples: 8,
            grid: 100,
            seed: 0,
        }
    }
}

/// Sparsification curves of one image at one error threshold, for the three
/// score functions.
#[derive(Debug, Clone)]
pub struct CurveSet {
    pub t_e: f64,
    /// Score: p_out.
    pub cls: SparsificationCurve,
    /// Score: Monte-Carlo epistemic std.
    pub bayes: Option<SparsificationCurve>,
    /// Score: total predictive std.
    pub total: Option<SparsificationCurve>,
}

#[derive(Debug, Clone)]
pub struct ImageEval {
    pub id: String,
    pub report: MetricsReport,
    pub curves: Vec<CurveSet>,
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub per_image: Vec<ImageEval>,
    pub aggregate: MetricsReport,
    /// Pooled-pixel curves at (t_e, t_e_secondary).
    pub aggregate_curves: Vec<CurveSet>,
}

struct PixelPool {
    err: Vec<f64>,
    p_out: Vec<f64>,
    epistemic: Vec<f64>,
    total_std: Vec<f64>,
}

/// Mean-mode evaluation of a checkpoint over prepared samples.
pub fn evaluate(
    ckpt: &Checkpoint,
    samples: &[PreparedSample],
    ids: &[String],
    opts: &EvalOptions,
) -> Result<EvalOutcome, EvalError> {
    if !(opts.threshold > 0.0 && opts.threshold < 1.0) {
        return Err(EvalError::Config(format!(
            "validated threshold {} outside (0, 1)",
            opts.threshold
        )));
    }
    assert_eq!(samples.len(), ids.len());
    let mut per_image = Vec::with_capacity(samples.len());
    let mut agg_pool = PixelPool {
        err: Vec::new(),
        p_out: Vec::new(),
        epistemic: Vec::new(),
        total_std: Vec::new(),
    };
    let mut agg = SumAgg::default();

    for (si, s) in samples.iter().enumerate() {
        let input = RefinerInput::from_tensors(
            Tensor::from_fn(1, s.height, s.width, |_, y, x| s.raw[y * s.width + x] as f64),
            Tensor::from_vec(
                2 * s.k + 1,
                s.height,
                s.width,
                s.slices.iter().map(|&v| v as f64).collect(),
            ),
            Tensor::from_vec(
                2 * s.k + 1,
                s.height,
                s.width,
                s.chi.iter().map(|&v| v as f64).collect(),
            ),
        );
        let out = refiner::forward(&input, &ckpt.params, &mut Mode::Mean)?;
        let raw_map = DisparityMap::from_parts(
            s.width,
            s.height,
            s.raw.clone(),
            s.raw_valid.clone(),
        );
        let gt_map = DisparityMap::from_parts(
            s.width,
            s.height,
            s.gt.clone(),
            s.valid.clone(),
        );
        let pred = refiner::predict_disparity(&raw_map, &out);

        let validated = if ckpt.ablation {
            s.valid.clone()
        } else {
            validated_mask(&out.p_out, opts.threshold, &s.valid)
        };
        let n_total = s.valid.iter().filter(|&&v| v).count();
        let n_validated = validated.iter().filter(|&&v| v).count();
        let report = MetricsReport {
            mae_validated: mae(&pred, &gt_map, &validated),
            mae_all: mae(&pred, &gt_map, &s.valid),
            raw_mae_validated: mae(&raw_map, &gt_map, &validated),
            inlier_fraction: if n_total > 0 {
                n_validated as f64 / n_total as f64
            } else {
                0.0
            },
            n_validated,
            n_total,
        };
        agg.add(&report, &pred, &gt_map, &raw_map, &validated, &s.valid);

        let mut curves = Vec::new();
        if !ckpt.ablation {
            let epistemic = if opts.mc_samples >= 2 {
                let (_, std, _) = refiner::mc_predict(
                    &input,
                    &ckpt.params,
                    opts.mc_samples,
                    crate::rng::derive_seed(opts.seed, 0xE7A1 + si as u64),
                )?;
                Some(std)
            } else {
                None
            };
            let mut pool = PixelPool {
                err: Vec::new(),
                p_out: Vec::new(),
                epistemic: Vec::new(),
                total_std: Vec::new(),
            };
            for y in 0..s.height {
                for x in 0..s.width {
                    let i = y * s.width + x;
                    if !s.valid[i] {
                        continue;
                    }
                    let e = (pred.disparity()[i] as f64 - s.gt[i] as f64).abs();
                    let p = out.p_out.at(0, y, x);
                    pool.err.push(e);
                    pool.p_out.push(p);
                    if let Some(std) = &epistemic {
                        let epi = std.at(0, y, x);
                        pool.epistemic.push(epi);
                        pool.total_std.push(bayes::marginal_predictive(p, epi, &ckpt.stochastic));
                    }
                }
            }
            for t_e in [opts.t_e, opts.t_e_secondary] {
                curves.push(curve_set(&pool, t_e, opts.grid));
            }
            agg_pool.err.extend_from_slice(&pool.err);
            agg_pool.p_out.extend_from_slice(&pool.p_out);
            agg_pool.epistemic.extend_from_slice(&pool.epistemic);
            agg_pool.total_std.extend_from_slice(&pool.total_std);
        }
        per_image.push(ImageEval { id: ids[si].clone(), report, curves });
    }

    let aggregate_curves = if agg_pool.err.is_empty() {
        Vec::new()
    } else {
        vec![
            curve_set(&agg_pool, opts.t_e, opts.grid),
            curve_set(&agg_pool, opts.t_e_secondary, opts.grid),
        ]
    };
    Ok(EvalOutcome { per_image, aggregate: agg.report(), aggregate_curves })
}

fn curve_set(pool: &PixelPool, t_e: f64, grid: usize) -> CurveSet {
    CurveSet {
        t_e,
        cls: sparsification(&pool.err, &pool.p_out, t_e, grid),
        bayes: (!pool.epistemic.is_empty())
            .then(|| sparsification(&pool.err, &pool.epistemic, t_e, grid)),
        total: (!pool.total_std.is_empty())
            .then(|| sparsification(&pool.err, &pool.total_std, t_e, grid)),
    }
}

#[derive(Default)]
struct SumAgg {
    abs_validated: f64,
    abs_all: f64,
    abs_raw_validated: f64,
    n_validated: usize,
    n_total: usize,
}

impl SumAgg {
    fn add(
        &mut self,
        _report: &MetricsReport,
        pred: &DisparityMap,
        gt: &DisparityMap,
        raw: &DisparityMap,
        validated: &[bool],
        valid: &[bool],
    ) {
        for i in 0..valid.len() {
            if valid[i] {
                self.n_total += 1;
                self.abs_all += (pred.disparity()[i] as f64 - gt.disparity()[i] as f64).abs();
            }
            if validated[i] {
                self.n_validated += 1;
                self.abs_validated +=
                    (pred.disparity()[i] as f64 - gt.disparity()[i] as f64).abs();
                self.abs_raw_validated +=
                    (raw.disparity()[i] as f64 - gt.disparity()[i] as f64).abs();
            }
        }
    }

    fn report(&self) -> MetricsReport {
        MetricsReport {
            mae_validated: (self.n_validated > 0)
                .then(|| self.abs_validated / self.n_validated as f64),
            mae_all: (self.n_total > 0).then(|| self.abs_all / self.n_total as f64),
            raw_mae_validated: (self.n_validated > 0)
                .then(|| self.abs_raw_validated / self.n_validated as f64),
            inlier_fraction: if self.n_total > 0 {
                self.n_validated as f64 / self.n_total as f64
            } else {
                0.0
            },
            n_validated: self.n_validated,
            n_total: self.n_total,
        }
    }
}

fn opt_field(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Per-image and aggregate CSV report.
pub fn write_report_csv(outcome: &EvalOutcome, path: impl AsRef<Path>) -> Result<(), EvalError> {
    let mut text = String::from(
        "id,n_total,n_validated,inlier_fraction,mae_validated,mae_all,raw_mae_validated,\
         auc_cls,auc_bayes,auc,auc_opt,auc_rand,aro,rir,rto\n",
    );
    let curve_cols = |curves: &[CurveSet]| -> String {
        match curves.first() {
            None => ",,,,,,,".into(),
            Some(cs) => format!(
                "{},{},{},{},{},{},{},{}",
                cs.cls.auc,
                opt_field(cs.bayes.as_ref().map(|c| c.auc)),
                opt_field(cs.total.as_ref().map(|c| c.auc)),
                cs.cls.auc_opt,
                cs.cls.auc_rand,
                opt_field(cs.total.as_ref().and_then(|c| c.aro).or(cs.cls.aro)),
                opt_field(cs.total.as_ref().and_then(|c| c.rir).or(cs.cls.rir)),
                opt_field(cs.total.as_ref().and_then(|c| c.rto).or(cs.cls.rto)),
            ),
        }
    };
    for img in &outcome.per_image {
        let r = &img.report;
        writeln!(
            text,
            "{},{},{},{},{},{},{},{}",
            img.id,
            r.n_total,
            r.n_validated,
            r.inlier_fraction,
            opt_field(r.mae_validated),
            opt_field(r.mae_all),
            opt_field(r.raw_mae_validated),
            curve_cols(&img.curves),
        )
        .expect("string write");
    }
    let r = &outcome.aggregate;
    writeln!(
        text,
        "aggregate,{},{},{},{},{},{},{}",
        r.n_total,
        r.n_validated,
        r.inlier_fraction,
        opt_field(r.mae_validated),
        opt_field(r.mae_all),
        opt_field(r.raw_mae_validated),
        curve_cols(&outcome.aggregate_curves),
    )
    .expect("string write");
    std::fs::write(path, text)?;
    Ok(())
}

/// `rho_d,f_pi` rows of one curve.
pub fn write_curve_csv(
    curve: &SparsificationCurve,
    path: impl AsRef<Path>,
) -> Result<(), EvalError> {
    let mut text = String::from("rho_d,f_pi\n");
    for (d, f) in curve.densities.iter().zip(&curve.f_pi) {
        writeln!(text, "{d},{f}").expect("string write");
    }
    std::fs::write(path, text)?;
    Ok(())
}

const SVG_W: f64 = 640.0;
const SVG_H: f64 = 420.0;
const SVG_MARGIN: f64 = 50.0;

fn svg_header(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SVG_W}\" height=\"{SVG_H}\" \
         viewBox=\"0 0 {SVG_W} {SVG_H}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{title}</text>\n",
        SVG_W / 2.0
    )
}

fn svg_axes() -> String {
    let x0 = SVG_MARGIN;
    let y0 = SVG_H - SVG_MARGIN;
    let x1 = SVG_W - SVG_MARGIN;
    let y1 = SVG_MARGIN;
    format!(
        "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n\
         <line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>\n"
    )
}

/// Plot labeled sparsification curves (density on x, false-inlier rate on y).
pub fn svg_curves(curves: &[(&str, &SparsificationCurve)], title: &str) -> String {
    let mut s = svg_header(title);
    s.push_str(&svg_axes());
    let y_max = curves
        .iter()
        .flat_map(|(_, c)| c.f_pi.iter().copied())
        .fold(0.05f64, f64::max);
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b"];
    for (ci, (label, curve)) in curves.iter().enumerate() {
        let color = colors[ci % colors.len()];
        let pts: Vec<String> = curve
            .densities
            .iter()
            .zip(&curve.f_pi)
            .map(|(&d, &f)| {
                let x = SVG_MARGIN + d * (SVG_W - 2.0 * SVG_MARGIN);
                let y = SVG_H - SVG_MARGIN - (f / y_max) * (SVG_H - 2.0 * SVG_MARGIN);
                format!("{x:.1},{y:.1}")
            })
            .collect();
        s.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            pts.join(" ")
        ));
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"{color}\">{label}</text>\n",
            SVG_MARGIN + 8.0,
            SVG_MARGIN + 16.0 + 16.0 * ci as f64
        ));
    }
    s.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\">density</text>\n",
        SVG_W / 2.0,
        SVG_H - 12.0
    ));
    s.push_str("</svg>\n");
    s
}

/// Histogram of per-image inlier fractions.
pub fn svg_histogram(values: &[f64], bins: usize, title: &str) -> String {
    let mut s = svg_header(title);
    s.push_str(&svg_axes());
    if !values.is_empty() && bins > 0 {
        let mut counts = vec![0usize; bins];
        for &v in values {
            let b = ((v * bins as f64) as usize).min(bins - 1);
            counts[b] += 1;
        }
        let max = counts.iter().copied().max().unwrap_or(1).max(1) as f64;
        let bw = (SVG_W - 2.0 * SVG_MARGIN) / bins as f64;
        for (b, &c) in counts.iter().enumerate() {
            let h = (c as f64 / max) * (SVG_H - 2.0 * SVG_MARGIN);
            let x = SVG_MARGIN + b as f64 * bw;
            let y = SVG_H - SVG_MARGIN - h;
            s.push_str(&format!(
                "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{:.1}\" height=\"{h:.1}\" \
                 fill=\"#1f77b4\" stroke=\"white\"/>\n",
                bw.max(1.0)
            ));
        }
    }
    s.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\">inlier fraction</text>\n",
        SVG_W / 2.0,
        SVG_H - 12.0
    ));
    s.push_str("</svg>\n");
    s
}
