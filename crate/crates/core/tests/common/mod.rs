//! Shared helpers for the integration tests: finite-difference gradient
//! checking against the tape, plus randomized per-op graph builders.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sdstereo_core::autodiff::{Ctx, NodeId, ParamId, Tape};
use sdstereo_core::ops::{ConvSpec, Padding, PoolKind};
use sdstereo_core::Tensor;

/// Graph builder: registers `params` (by index) on the tape and returns a
/// scalar loss node. Must be a pure function of the parameter values so the
/// finite-difference probe can re-run it.
pub type Builder = Box<dyn Fn(&mut Tape, &[Tensor]) -> NodeId>;

pub struct OpCase {
    pub name: &'static str,
    pub params: Vec<Tensor>,
    pub build: Builder,
}

fn loss_of(build: &Builder, params: &[Tensor]) -> f64 {
    let mut tape = Tape::new();
    let loss = build(&mut tape, params);
    tape.value(loss).item()
}

/// Largest relative error between analytic and central finite-difference
/// gradients over every element of every parameter.
pub fn fd_max_rel_err(case: &OpCase) -> f64 {
    let h = 1e-5;
    let mut tape = Tape::new();
    let loss = (case.build)(&mut tape, &case.params);
    let grads = tape.backward(loss).expect("backward failed");

    let mut worst: f64 = 0.0;
    for (pi, p) in case.params.iter().enumerate() {
        let analytic = grads.get(ParamId(pi)).expect("missing gradient");
        for j in 0..p.len() {
            let mut plus = case.params.to_vec();
            plus[pi].data_mut()[j] += h;
            let mut minus = case.params.to_vec();
            minus[pi].data_mut()[j] -= h;
            let fd = (loss_of(&case.build, &plus) - loss_of(&case.build, &minus)) / (2.0 * h);
            let a = analytic.data()[j];
            let err = (a - fd).abs() / fd.abs().max(1e-3);
            worst = worst.max(err);
        }
    }
    worst
}

fn uniform(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(c, h, w, |_, _, _| lo + (hi - lo) * rng.random::<f64>())
}

/// Random tensor with all pairwise gaps bounded away from zero, so min/max
/// pooling decisions cannot flip under the finite-difference probe.
fn distinct(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor {
    let n = c * h * w;
    let mut vals: Vec<f64> = (0..n).map(|i| -1.0 + 2.0 * i as f64 / n as f64).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        vals.swap(i, j);
    }
    Tensor::from_vec(c, h, w, vals)
}

/// Random value kept at least `margin` away from every point in `kinks`.
fn away_from(rng: &mut ChaCha8Rng, lo: f64, hi: f64, kinks: &[f64], margin: f64) -> f64 {
    loop {
        let v = lo + (hi - lo) * rng.random::<f64>();
        if kinks.iter().all(|k| (v - k).abs() > margin) {
            return v;
        }
    }
}

fn rand_weights(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    uniform(rng, 1, 1, n, -1.0, 1.0)
}

/// One randomized instance of every differentiable op, each reduced to a
/// scalar by a weighted sum with fixed random weights.
pub fn op_cases(rng: &mut ChaCha8Rng) -> Vec<OpCase> {
    let mut cases = Vec::new();

    // conv2d, several kernel geometries, gradients w.r.t. input, weights, bias
    for (kh, kw, padding, name) in [
        (1usize, 1usize, Padding::Same, "conv1x1"),
        (3, 3, Padding::Same, "conv3x3_same"),
        (3, 3, Padding::Valid, "conv3x3_valid"),
        (1, 5, Padding::Same, "conv1x5"),
        (5, 1, Padding::Same, "conv5x1"),
    ] {
        let spec = ConvSpec::new(2, 3, kh, kw, padding);
        let x = uniform(rng, 3, 6, 7, -1.0, 1.0);
        let w = uniform(rng, 6, kh, kw, -1.0, 1.0);
        let b = uniform(rng, 2, 1, 1, -0.5, 0.5);
        let (oh, ow) = spec.out_dims(6, 7);
        let lw = uniform(rng, 2, oh, ow, -1.0, 1.0);
        cases.push(OpCase {
            name,
            params: vec![x, w, b],
            build: Box::new(move |tape, p| {
                let x = tape.param(ParamId(0), &p[0]);
                let w = tape.param(ParamId(1), &p[1]);
                let b = tape.param(ParamId(2), &p[2]);
                let y = tape.conv2d(&x, &w, &b, spec).unwrap();
                tape.weighted_sum(&y, lw.clone())
            }),
        });
    }

    for (kind, name) in [
        (PoolKind::Min, "pool_min"),
        (PoolKind::Max, "pool_max"),
        (PoolKind::Avg, "pool_avg"),
    ] {
        let x = distinct(rng, 2, 5, 6);
        let lw = uniform(rng, 2, 3, 3, -1.0, 1.0);
        cases.push(OpCase {
            name,
            params: vec![x],
            build: Box::new(move |tape, p| {
                let x = tape.param(ParamId(0), &p[0]);
                let y = tape.pool(&x, kind, 2).unwrap();
                tape.weighted_sum(&y, lw.clone())
            }),
        });
    }

    {
        let x = uniform(rng, 2, 3, 3, -1.0, 1.0);
        let lw = uniform(rng, 2, 5, 6, -1.0, 1.0);
        cases.push(OpCase {
            name: "upsample_nearest",
            params: vec![x],
            build: Box::new(move |tape, p| {
                let x = tape.param(ParamId(0), &p[0]);
                let y = tape.upsample(&x, 2, 5, 6).unwrap();
                tape.weighted_sum(&y, lw.clone())
            }),
        });
    }

    for (slope, name) in [(0.3, "leaky_relu_0.3"), (0.1, "leaky_relu_0.1")] {
        let x = Tensor::from_fn(1, 4, 5, |_, _, _| away_from(rng, -2.0, 2.0, &[0.0], 1e-3));
        let lw = uniform(rng, 1, 4, 5, -1.0, 1.0);
        cases.push(OpCase {
            name,
            params: vec![x],
            build: Box::new(move |tape, p| {
                let x = tape.param(ParamId(0), &p[0]);
                let y = tape.leaky_relu(&x, slope);
                tape.weighted_sum(&y, lw.clone())
            }),
        });
    }

    {
        let x = Tensor::from_fn(1, 4, 5, |_, _, _| {
            away_from(rng, -2.0, 2.0, &[-1.0, 0.0, 1.0], 1e-3)
        });
        let lw = uniform(rng, 1, 4, 5, -1.0, 1.0);
        cases.push(OpCase {
            name: "leaky_hardswish",
            params: vec![x],
            build: Box::new(move |tape, p| {
                let x = tape.param(ParamId(0), &p[0]);
                let y = tape.leaky_hardswish(&x, 0.01);
                tape.weighted_sum(&y, lw.clone())
            }),
        });
    }

    {
        let x = uniform(rng, 1, 4, 5, -3.0, 3.0);
        let lw = uniform(rng, 1, 4, 5, -1.0, 1.0);
        cases.push(OpCase {
            name: "sigmoid",
            params: vec![x],
            build: Box::new(move |tape, p| {
                let x = tape.param(ParamId(0), &p[0]);
                let y = tape.sigmoid(&x);
                tape.weighted_sum(&y, lw.clone())
            }),
        });
    }

    {
        let x = uniform(rng, 1, 4, 5, -1.0, 1.0);
        let mask = {
            let keep = 1.0 / (1.0 - 0.3);
            Tensor::from_fn(1, 4, 5, |_, _, _| if rng.random::<f64>() < 0.3 { 0.0 } else { keep })
        };
        let lw = uniform(rng, 1, 4, 5, -1.0, 1.0);
        cases.push(OpCase {
            name: "dropout_train",
            params: vec![x],
            build: Box::new(move |tape, p| {
                let x = tape.param(ParamId(0), &p[0]);
                let y = tape.dropout(&x, mask.clone());
                tape.weighted_sum(&y, lw.clone())
            }),
        });
    }

    {
        // variational 1x1 convolution: reparameterized weights + bias
        let mu_w = uniform(rng, 6, 1, 1, -1.0, 1.0);
        let rho_w = uniform(rng, 6, 1, 1, -3.0, 0.5);
        let mu_b = uniform(rng, 2, 1, 1, -0.5, 0.5);
        let rho_b = uniform(rng, 2, 1, 1, -3.0, 0.5);
        let eps_w = uniform(rng, 6, 1, 1, -1.5, 1.5);
        let eps_b = uniform(rng, 2, 1, 1, -1.5, 1.5);
        let x = uniform(rng, 3, 4, 4, -1.0, 1.0);
        let lw = uniform(rng, 2, 4, 4, -1.0, 1.0);
        let spec = ConvSpec::new(2, 3, 1, 1, Padding::Same);
        cases.push(OpCase {
            name: "variational_conv1x1_sample",
            params: vec![mu_w, rho_w, mu_b, rho_b],
            build: Box::new(move |tape, p| {
                let mu_w = tape.param(ParamId(0), &p[0]);
                let rho_w = tape.param(ParamId(1), &p[1]);
                let mu_b = tape.param(ParamId(2), &p[2]);
                let rho_b = tape.param(ParamId(3), &p[3]);
                let w = tape.reparam(&mu_w, &rho_w, eps_w.clone());
                let b = tape.reparam(&mu_b, &rho_b, eps_b.clone());
                let xc = tape.constant(x.clone());
                let y = tape.conv2d(&xc, &w, &b, spec).unwrap();
                tape.weighted_sum(&y, lw.clone())
            }),
        });
    }

    {
        let mu = uniform(rng, 1, 1, 10, -1.0, 1.0);
        let rho = uniform(rng, 1, 1, 10, -3.0, 1.0);
        cases.push(OpCase {
            name: "kl_gaussian",
            params: vec![mu, rho],
            build: Box::new(move |tape, p| {
                let mu = tape.param(ParamId(0), &p[0]);
                let rho = tape.param(ParamId(1), &p[1]);
                tape.kl_gaussian(&mu, &rho, 1.0)
            }),
        });
    }

    {
        // heteroscedastic pixel loss shape: exercises sub/affine/square/div/ln/add
        let delta = uniform(rng, 1, 3, 4, -0.5, 0.5);
        let pout_logit = uniform(rng, 1, 3, 4, -2.0, 2.0);
        let residual_base = uniform(rng, 1, 3, 4, -2.0, 2.0);
        let lw = rand_weights(rng, 12).map(|v| v.abs() / 12.0);
        let lw = Tensor::from_vec(1, 3, 4, lw.into_vec());
        cases.push(OpCase {
            name: "loss_composition",
            params: vec![delta, pout_logit],
            build: Box::new(move |tape, p| {
                let delta = tape.param(ParamId(0), &p[0]);
                let logit = tape.param(ParamId(1), &p[1]);
                let pout = tape.sigmoid(&logit);
                let base = tape.constant(residual_base.clone());
                let r = tape.sub(&base, &delta);
                let sigma = tape.affine(&pout, 3.8, 0.2);
                let r2 = tape.square(&r);
                let s2 = tape.square(&sigma);
                let quad = tape.div(&r2, &s2);
                let quad = tape.affine(&quad, 0.5, 0.0);
                let lns = tape.ln(&sigma);
                let nll = tape.add(&lns, &quad);
                tape.weighted_sum(&nll, lw.clone())
            }),
        });
    }

    {
        // concat + mul across two branches
        let a = uniform(rng, 2, 3, 3, -1.0, 1.0);
        let b = uniform(rng, 1, 3, 3, -1.0, 1.0);
        let lw = uniform(rng, 3, 3, 3, -1.0, 1.0);
        cases.push(OpCase {
            name: "concat_mul",
            params: vec![a, b],
            build: Box::new(move |tape, p| {
                let a = tape.param(ParamId(0), &p[0]);
                let b = tape.param(ParamId(1), &p[1]);
                let prod = tape.mul(&b, &b);
                let cat = tape.concat(&[&a, &prod]).unwrap();
                tape.weighted_sum(&cat, lw.clone())
            }),
        });
    }

    cases
}
