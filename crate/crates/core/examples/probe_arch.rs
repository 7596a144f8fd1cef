use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sdstereo_core::autodiff::{Ctx, Tape};
use sdstereo_core::bayes::{self, BatchItem, StochasticConfig};
use sdstereo_core::datagen::read_manifest;
use sdstereo_core::matcher::MatchConfig;
use sdstereo_core::refiner::{self, ArchDescriptor, Mode, RefinerInput, RefinerParams};
use sdstereo_core::trainer::{self, sample_patches};
use sdstereo_core::Tensor;

// Train the real refiner graph with an oracle inlier mask and a fixed
// sigma=0.2 Gaussian loss (what p_out is supposed to provide), mean mode
// (no dropout / no weight sampling). Separates architecture trainability
// from the stochastic-classification pathway.
fn main() {
    let manifest = read_manifest("/tmp/sdtest/test256/manifest.txt").unwrap();
    let samples = trainer::prepare_dataset(&manifest, &MatchConfig::default(), 3).unwrap();
    let desc = ArchDescriptor::default();
    let mut params = RefinerParams::init(&desc, 42).unwrap();
    let cfg = trainer::TrainConfig::default();

    // plain Adam over the canonical tensor order
    let shapes: Vec<Tensor> = params.tensors().iter().map(|(_, t)| {
        let s = t.shape();
        Tensor::zeros(s.channels, s.height, s.width)
    }).collect();
    let mut m = shapes.clone();
    let mut v = shapes;
    let stoch = StochasticConfig { sigma_in: 0.2, sigma_out: 0.2, kl_scale: 0.05, ..Default::default() };

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for step in 0..960u64 {
        let refs = sample_patches(&samples, 64, 8, &mut rng).unwrap();
        let mut tape = Tape::new();
        let (handles, priors) = refiner::register_all(&mut tape, &params, true);
        let mut items = Vec::new();
        for r in &refs {
            let (input, residual, valid) = samples[r.sample].patch(r.y0, r.x0, 64);
            let oracle: Vec<bool> = valid.iter().enumerate()
                .map(|(i, &b)| b && residual.data()[i].abs() <= 0.6).collect();
            let (delta, _, _, _) = refiner::forward_with(&mut tape, &params, &handles, &input, &mut Mode::Mean).unwrap();
            items.push(BatchItem { delta, p_out: None, residual_base: residual, valid: oracle });
        }
        let (loss, bd) = bayes::total_loss(&mut tape, &items, &priors, &stoch, 40, 786432).unwrap();
        let grads = tape.backward(loss).unwrap();
        let t = (step + 1) as i32;
        for (i, (_, p)) in params.tensors_mut().into_iter().enumerate() {
            let Some(g) = grads.get(sdstereo_core::autodiff::ParamId(i)) else { continue };
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[i].data_mut()[j] = cfg.beta1 * m[i].data()[j] + (1.0 - cfg.beta1) * gj;
                v[i].data_mut()[j] = cfg.beta2 * v[i].data()[j] + (1.0 - cfg.beta2) * gj * gj;
                let mh = m[i].data()[j] / (1.0 - cfg.beta1.powi(t));
                let vh = v[i].data()[j] / (1.0 - cfg.beta2.powi(t));
                p.data_mut()[j] -= cfg.learning_rate * mh / (vh.sqrt() + cfg.adam_eps);
            }
        }
        if step % 160 == 0 {
            println!("step {step:4}  nll {:+.4}", bd.nll);
        }
    }

    // validated-oracle eval
    let mut raw_mae = 0.0; let mut net_mae = 0.0; let mut n = 0.0;
    for s in &samples {
        let input = RefinerInput::from_tensors(
            Tensor::from_fn(1, s.height, s.width, |_, y, x| s.raw[y * s.width + x] as f64),
            Tensor::from_vec(7, s.height, s.width, s.slices.iter().map(|&x| x as f64).collect()),
            Tensor::from_vec(7, s.height, s.width, s.chi.iter().map(|&x| x as f64).collect()),
        );
        let out = refiner::forward(&input, &params, &mut Mode::Mean).unwrap();
        for y in 0..s.height { for x in 0..s.width {
            let i = y * s.width + x;
            if !s.valid[i] { continue; }
            let r = (s.gt[i] - s.raw[i]) as f64;
            if r.abs() > 0.6 { continue; }
            raw_mae += r.abs();
            net_mae += (r - out.delta.at(0, y, x)).abs();
            n += 1.0;
        }}
    }
    println!("oracle-masked real architecture: raw {:.4} -> net {:.4} (n={n})", raw_mae / n, net_mae / n);
}
