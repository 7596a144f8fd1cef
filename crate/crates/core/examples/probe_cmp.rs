use sdstereo_core::checkpoint::load_checkpoint;
use sdstereo_core::datagen::read_manifest;
use sdstereo_core::matcher::MatchConfig;
use sdstereo_core::refiner::{self, Mode, RefinerInput};
use sdstereo_core::trainer;
use sdstereo_core::Tensor;

// Criterion-5 style comparison: both models' MAE on the full model's
// validated pixel set of the test split.
fn main() {
    let full = load_checkpoint(std::env::args().nth(1).unwrap()).unwrap();
    let base = load_checkpoint(std::env::args().nth(2).unwrap()).unwrap();
    let manifest = read_manifest("/tmp/sdtest/test256/manifest.txt").unwrap();
    let samples = trainer::prepare_dataset(&manifest, &MatchConfig::default(), 3).unwrap();
    let (mut f, mut b, mut r, mut nv, mut nt) = (0.0, 0.0, 0.0, 0usize, 0usize);
    for s in &samples {
        let input = RefinerInput::from_tensors(
            Tensor::from_fn(1, s.height, s.width, |_, y, x| s.raw[y * s.width + x] as f64),
            Tensor::from_vec(7, s.height, s.width, s.slices.iter().map(|&x| x as f64).collect()),
            Tensor::from_vec(7, s.height, s.width, s.chi.iter().map(|&x| x as f64).collect()),
        );
        let of = refiner::forward(&input, &full.params, &mut Mode::Mean).unwrap();
        let ob = refiner::forward(&input, &base.params, &mut Mode::Mean).unwrap();
        for y in 0..s.height { for x in 0..s.width {
            let i = y * s.width + x;
            if !s.valid[i] { continue; }
            nt += 1;
            if of.p_out.at(0, y, x) > 0.05 { continue; }
            nv += 1;
            let gt = s.gt[i] as f64; let raw = s.raw[i] as f64;
            f += (raw + of.delta.at(0, y, x) - gt).abs();
            b += (raw + ob.delta.at(0, y, x) - gt).abs();
            r += (raw - gt).abs();
        }}
    }
    let n = nv as f64;
    println!("validated {} / {} = {:.3}", nv, nt, nv as f64 / nt as f64);
    println!("full {:.4}  base {:.4}  raw {:.4}  ratio {:.3}", f/n, b/n, r/n, (f/n)/(b/n));
}
