use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sdstereo_core::autodiff::{Ctx, ParamId, Tape};
use sdstereo_core::datagen::read_manifest;
use sdstereo_core::matcher::MatchConfig;
use sdstereo_core::ops::{ConvSpec, Padding};
use sdstereo_core::trainer::{self, sample_patches};
use sdstereo_core::Tensor;

fn main() {
    let manifest = read_manifest("/tmp/sdtest/test256/manifest.txt").unwrap();
    let samples = trainer::prepare_dataset(&manifest, &MatchConfig::default(), 3).unwrap();

    // tiny model: delta = w2 * lrelu(W1 * x + b1) + b2 on the 15 stacked channels
    let hidden = 12usize;
    let mut w1 = Tensor::from_fn(hidden * 15, 1, 1, |c, _, _| ((c * 37 % 101) as f64 / 101.0 - 0.5) * 0.3);
    let mut b1 = Tensor::zeros(hidden, 1, 1);
    let mut w2 = Tensor::from_fn(hidden, 1, 1, |c, _, _| ((c * 53 % 97) as f64 / 97.0 - 0.5) * 0.2);
    let mut b2 = Tensor::zeros(1, 1, 1);
    let spec1 = ConvSpec::new(hidden, 15, 1, 1, Padding::Same);
    let spec2 = ConvSpec::new(1, hidden, 1, 1, Padding::Same);

    let mut m = vec![Tensor::zeros(hidden * 15, 1, 1), Tensor::zeros(hidden, 1, 1), Tensor::zeros(hidden, 1, 1), Tensor::scalar(0.0)];
    let mut v = m.clone();
    let (b1c, b2c, eps, lr) = (0.9f64, 0.999f64, 1e-8f64, 1e-3f64);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for step in 0..1500u64 {
        let refs = sample_patches(&samples, 48, 8, &mut rng).unwrap();
        let mut tape = Tape::new();
        let ws: Vec<_> = vec![
            tape.param(ParamId(0), &w1),
            tape.param(ParamId(1), &b1),
            tape.param(ParamId(2), &w2),
            tape.param(ParamId(3), &b2),
        ];
        let mut loss_acc: Option<sdstereo_core::autodiff::NodeId> = None;
        let mut n_valid_total = 0usize;
        let mut items = Vec::new();
        for r in &refs {
            let (input, residual, valid) = samples[r.sample].patch(r.y0, r.x0, 48);
            let stacked = input.stacked(72.0).unwrap();
            let inlier: Vec<bool> = valid
                .iter()
                .enumerate()
                .map(|(i, &b)| b && residual.data()[i].abs() <= 0.6)
                .collect();
            n_valid_total += inlier.iter().filter(|&&v| v).count();
            items.push((stacked, residual, valid));
        }
        for (stacked, residual, valid) in items {
            // oracle inlier mask: train only where |r| <= 0.6
            let valid: Vec<bool> = valid
                .iter()
                .enumerate()
                .map(|(i, &b)| b && residual.data()[i].abs() <= 0.6)
                .collect();
            let x = tape.constant(stacked);
            let h = tape.conv2d(&x, &ws[0], &ws[1], spec1).unwrap();
            let h = tape.leaky_relu(&h, 0.3);
            let d = tape.conv2d(&h, &ws[2], &ws[3], spec2).unwrap();
            let target = tape.constant(residual);
            let rnode = tape.sub(&target, &d);
            let r2 = tape.square(&rnode);
            let wts = Tensor::from_vec(1, 48, 48, valid.iter().map(|&b| if b { 0.5 / n_valid_total as f64 } else { 0.0 }).collect());
            let part = tape.weighted_sum(&r2, wts);
            loss_acc = Some(match loss_acc { Some(acc) => tape.add(&acc, &part), None => part });
        }
        let loss = loss_acc.unwrap();
        let loss_val = tape.value(loss).item();
        let grads = tape.backward(loss).unwrap();
        let t = (step + 1) as i32;
        for (i, p) in [&mut w1, &mut b1, &mut w2, &mut b2].into_iter().enumerate() {
            let g = grads.get(ParamId(i)).unwrap();
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[i].data_mut()[j] = b1c * m[i].data()[j] + (1.0 - b1c) * gj;
                v[i].data_mut()[j] = b2c * v[i].data()[j] + (1.0 - b2c) * gj * gj;
                let mh = m[i].data()[j] / (1.0 - b1c.powi(t));
                let vh = v[i].data()[j] / (1.0 - b2c.powi(t));
                p.data_mut()[j] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        if step % 250 == 0 {
            println!("step {step:5}  loss {loss_val:.5}");
        }
    }

    // evaluate on all valid inlier pixels
    let mut raw_mae = 0.0; let mut net_mae = 0.0; let mut n = 0.0;
    let mut eager = sdstereo_core::autodiff::Eager;
    let we: Vec<Tensor> = vec![w1, b1, w2, b2];
    for s in &samples {
        let (input, residual, valid) = s.patch(0, 0, s.height.min(s.width));
        let stacked = input.stacked(72.0).unwrap();
        let h = sdstereo_core::ops::conv2d(&stacked, &we[0], &we[1], spec1).unwrap();
        let h = sdstereo_core::ops::leaky_relu(&h, 0.3);
        let d = sdstereo_core::ops::conv2d(&h, &we[2], &we[3], spec2).unwrap();
        let _ = &mut eager;
        for i in 0..valid.len() {
            if !valid[i] { continue; }
            let r = residual.data()[i];
            if r.abs() > 0.6 { continue; }
            raw_mae += r.abs();
            net_mae += (r - d.data()[i]).abs();
            n += 1.0;
        }
    }
    println!("inlier raw MAE {:.4}  tiny-net MAE {:.4}  (n={n})", raw_mae / n, net_mae / n);
}
