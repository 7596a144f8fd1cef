//! Sparsification against its closed forms and constructed orderings, the
//! theory sweep, and identity-refiner evaluation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdstereo_core::bayes::StochasticConfig;
use sdstereo_core::checkpoint::Checkpoint;
use sdstereo_core::datagen::{gen_dataset, SceneConfig};
use sdstereo_core::eval::{self, EvalOptions};
use sdstereo_core::matcher::MatchConfig;
use sdstereo_core::refiner::{ArchDescriptor, RefinerParams};
use sdstereo_core::trainer;

fn synthetic_pixels(
    rng: &mut ChaCha8Rng,
    n: usize,
    rho_out: f64,
    t_e: f64,
) -> (Vec<f64>, Vec<bool>) {
    // errors: inliers uniform below t_e, outliers uniform in (t_e, 10 t_e]
    let mut errs = Vec::with_capacity(n);
    let mut is_out = Vec::with_capacity(n);
    for _ in 0..n {
        let o = rng.random::<f64>() < rho_out;
        let e = if o {
            t_e * (1.0 + 9.0 * rng.random::<f64>())
        } else {
            t_e * rng.random::<f64>() * 0.95
        };
        errs.push(e);
        is_out.push(o);
    }
    (errs, is_out)
}

#[test]
fn oracle_score_attains_optimal_curve() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (errs, _) = synthetic_pixels(&mut rng, 100_000, 0.2, 0.2);
    let curve = eval::sparsification(&errs, &errs, 0.2, 100);
    assert!(
        (curve.auc - curve.auc_opt).abs() < 0.01,
        "oracle auc {} vs optimal {}",
        curve.auc,
        curve.auc_opt
    );
    let rto = curve.rto.expect("rto defined");
    assert!((rto - 1.0).abs() < 0.02, "rto {rto}");
}

#[test]
fn constant_score_matches_random_classifier() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (errs, _) = synthetic_pixels(&mut rng, 100_000, 0.2, 0.2);
    let score = vec![0.5; errs.len()];
    let curve = eval::sparsification(&errs, &score, 0.2, 100);
    assert!(
        (curve.auc - curve.rho_out).abs() < 0.02,
        "constant-score auc {} vs rho_out {}",
        curve.auc,
        curve.rho_out
    );
    let rir = curve.rir.expect("rir defined");
    assert!(rir.abs() < 0.05, "rir {rir}");
}

#[test]
fn analytic_optimal_area_at_rho_out_fifth() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    // force rho_out very close to 0.2 by construction
    let n = 100_000;
    let mut errs = Vec::with_capacity(n);
    for i in 0..n {
        errs.push(if i % 5 == 0 { 1.0 } else { 0.05 });
    }
    let score: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let curve = eval::sparsification(&errs, &score, 0.2, 100);
    assert!((curve.rho_out - 0.2).abs() < 1e-9);
    let analytic = 0.2 + 0.8 * 0.8f64.ln();
    assert!(
        (curve.auc_opt - analytic).abs() < 1e-3,
        "grid auc_opt {} vs analytic {}",
        curve.auc_opt,
        analytic
    );
}

#[test]
fn degenerate_all_inliers_or_all_outliers() {
    let errs = vec![0.01; 500];
    let score: Vec<f64> = (0..500).map(|i| i as f64).collect();
    let c = eval::sparsification(&errs, &score, 0.2, 100);
    assert_eq!(c.rho_out, 0.0);
    assert_eq!(c.auc, 0.0);
    assert!(c.rir.is_none(), "rir undefined when auc_rand is 0");
    assert!(c.rto.is_none());

    let errs = vec![5.0; 500];
    let c = eval::sparsification(&errs, &score, 0.2, 100);
    assert_eq!(c.rho_out, 1.0);
    // constant-1 curve integrated over the grid span [0.01, 1]
    assert!((c.auc - 0.99).abs() < 1e-12);
    assert!(c.aro.is_some());
}

#[test]
fn theory_sweep_has_no_counterexamples() {
    assert_eq!(eval::theory_sweep(10_000, 777), 0);
}

fn identity_params(desc: &ArchDescriptor) -> RefinerParams {
    let mut p = RefinerParams::init(desc, 11).unwrap();
    // delta == 0 everywhere
    for v in p.reg_final.mu_w.data_mut() {
        *v = 0.0;
    }
    for v in p.reg_final.mu_b.data_mut() {
        *v = 0.0;
    }
    // p_out ~ 0 everywhere: drive the last separable conv deep negative
    for v in p.out_sep_col.mu_w.data_mut() {
        *v = 0.0;
    }
    for v in p.out_sep_col.mu_b.data_mut() {
        *v = -40.0;
    }
    p
}

#[test]
fn identity_refiner_reproduces_raw_mae() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SceneConfig {
        seed: 5,
        width: 64,
        height: 64,
        d_min: 4.0,
        d_max: 24.0,
        ..Default::default()
    };
    let manifest = gen_dataset(&cfg, 2, dir.path()).unwrap();
    let mcfg = MatchConfig { d_max: 24, ..Default::default() };
    let samples = trainer::prepare_dataset(&manifest, &mcfg, 3).unwrap();
    let ids: Vec<String> = manifest.entries.iter().map(|e| e.id.clone()).collect();

    let ckpt = Checkpoint {
        params: identity_params(&ArchDescriptor { d_norm: 24.0, ..Default::default() }),
        stochastic: StochasticConfig::default(),
        ablation: false,
    };
    let opts = EvalOptions { mc_samples: 0, ..Default::default() };
    let outcome = eval::evaluate(&ckpt, &samples, &ids, &opts).unwrap();

    // delta == 0 and p_out == 0: every valid pixel is validated and the
    // refined MAE equals the raw MAE exactly
    let agg = &outcome.aggregate;
    assert_eq!(agg.n_validated, agg.n_total);
    assert_eq!(agg.inlier_fraction, 1.0);
    let mv = agg.mae_validated.unwrap();
    let rv = agg.raw_mae_validated.unwrap();
    assert_eq!(mv.to_bits(), rv.to_bits());
    assert_eq!(agg.mae_all.unwrap().to_bits(), mv.to_bits());

    // per-image inlier fractions aggregate as a pixel-weighted mean
    let weighted: f64 = outcome
        .per_image
        .iter()
        .map(|img| img.report.inlier_fraction * img.report.n_total as f64)
        .sum::<f64>()
        / outcome.per_image.iter().map(|i| i.report.n_total as f64).sum::<f64>();
    assert!((weighted - agg.inlier_fraction).abs() < 1e-12);
}

#[test]
fn report_and_curve_csv_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SceneConfig {
        seed: 6,
        width: 64,
        height: 64,
        d_min: 4.0,
        d_max: 24.0,
        ..Default::default()
    };
    let manifest = gen_dataset(&cfg, 2, dir.path()).unwrap();
    let mcfg = MatchConfig { d_max: 24, ..Default::default() };
    let samples = trainer::prepare_dataset(&manifest, &mcfg, 3).unwrap();
    let ids: Vec<String> = manifest.entries.iter().map(|e| e.id.clone()).collect();
    let ckpt = Checkpoint {
        params: identity_params(&ArchDescriptor { d_norm: 24.0, ..Default::default() }),
        stochastic: StochasticConfig::default(),
        ablation: false,
    };
    let opts = EvalOptions { mc_samples: 4, ..Default::default() };
    let outcome = eval::evaluate(&ckpt, &samples, &ids, &opts).unwrap();

    let report = dir.path().join("report.csv");
    eval::write_report_csv(&outcome, &report).unwrap();
    let text = std::fs::read_to_string(&report).unwrap();
    assert_eq!(text.lines().count(), 1 + 2 + 1, "header + 2 images + aggregate");
    assert!(text.lines().last().unwrap().starts_with("aggregate,"));

    let curve_path = dir.path().join("curve.csv");
    eval::write_curve_csv(&outcome.aggregate_curves[0].cls, &curve_path).unwrap();
    let text = std::fs::read_to_string(&curve_path).unwrap();
    assert_eq!(text.lines().count(), 101);

    let svg = eval::svg_curves(
        &[("p_out", &outcome.aggregate_curves[0].cls)],
        "sparsification",
    );
    assert!(svg.starts_with("<svg"));
    assert!(svg.contains("polyline"));
    let hist = eval::svg_histogram(&[0.2, 0.4, 0.9], 10, "inlier fractions");
    assert!(hist.contains("rect"));
}

#[test]
fn mae_scales_linearly_and_is_permutation_invariant() {
    use sdstereo_core::imageio::DisparityMap;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let gt_vals: Vec<f32> = (0..64).map(|_| rng.random::<f32>() * 40.0).collect();
    let err: Vec<f32> = (0..64).map(|_| rng.random::<f32>() - 0.5).collect();
    let pred_vals: Vec<f32> = gt_vals.iter().zip(&err).map(|(g, e)| g + e).collect();
    let gt = DisparityMap::from_parts(8, 8, gt_vals.clone(), vec![true; 64]);
    let pred = DisparityMap::from_parts(8, 8, pred_vals, vec![true; 64]);
    let m1 = eval::mae(&pred, &gt, &[true; 64]).unwrap();

    // doubling the error doubles the mae
    let pred2_vals: Vec<f32> = gt_vals.iter().zip(&err).map(|(g, e)| g + 2.0 * e).collect();
    let pred2 = DisparityMap::from_parts(8, 8, pred2_vals, vec![true; 64]);
    let m2 = eval::mae(&pred2, &gt, &[true; 64]).unwrap();
    assert!((m2 - 2.0 * m1).abs() < 1e-6);
}
