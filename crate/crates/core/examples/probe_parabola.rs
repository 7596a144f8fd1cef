use sdstereo_core::datagen::read_manifest;
use sdstereo_core::matcher::MatchConfig;
use sdstereo_core::trainer;

fn main() {
    let manifest = read_manifest("/tmp/sdtest/test256/manifest.txt").unwrap();
    let samples = trainer::prepare_dataset(&manifest, &MatchConfig::default(), 3).unwrap();
    let mut raw_sum = 0.0; let mut par_sum = 0.0; let mut n = 0.0;
    for s in &samples {
        let plane = s.width * s.height;
        for i in 0..plane {
            if !s.valid[i] { continue; }
            let r = (s.gt[i] - s.raw[i]) as f64;
            if r.abs() > 0.6 { continue; } // inlier pixels
            // slices channel k=3 is offset 0
            let vm = s.slices[2 * plane + i] as f64;
            let v0 = s.slices[3 * plane + i] as f64;
            let vp = s.slices[4 * plane + i] as f64;
            let chi_ok = s.chi[2 * plane + i] > 0.5 && s.chi[4 * plane + i] > 0.5;
            if !chi_ok { continue; }
            let denom = vm - 2.0 * v0 + vp;
            let delta = if denom.abs() > 1e-12 { 0.5 * (vm - vp) / denom } else { 0.0 };
            let delta = delta.clamp(-0.5, 0.5);
            raw_sum += r.abs();
            par_sum += (r - delta).abs();
            n += 1.0;
        }
    }
    println!("inlier pixels: {n}");
    println!("raw MAE       : {:.4}", raw_sum / n);
    println!("parabola MAE  : {:.4}", par_sum / n);
}
