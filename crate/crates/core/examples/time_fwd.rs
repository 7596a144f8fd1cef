use std::time::Instant;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdstereo_core::refiner::{self, ArchDescriptor, Mode, RefinerInput, RefinerParams};
use sdstereo_core::Tensor;
fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (w, h) = (640, 480);
    let raw = Tensor::from_fn(1, h, w, |_, _, _| (rng.random::<f64>() * 60.0).floor());
    let chi = Tensor::filled(7, h, w, 1.0);
    let slices = Tensor::from_fn(7, h, w, |_, _, _| 2.0 * rng.random::<f64>() - 1.0);
    let input = RefinerInput::from_tensors(raw, slices, chi);
    let params = RefinerParams::init(&ArchDescriptor::default(), 2).unwrap();
    let _ = refiner::forward(&input, &params, &mut Mode::Mean).unwrap();
    for _ in 0..3 {
        let t = Instant::now();
        let _ = refiner::forward(&input, &params, &mut Mode::Mean).unwrap();
        println!("640x480 mean forward: {:?}", t.elapsed());
    }
}
