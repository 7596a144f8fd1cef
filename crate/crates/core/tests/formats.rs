//! Round-trip and robustness tests for the file formats.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdstereo_core::imageio::{
    read_pfm, read_png_gray, write_pfm, write_png_gray, DisparityMap, GrayImage, ImageIoError,
};

#[test]
fn pfm_roundtrip_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let (w, h) = (16, 16);
    let disparity: Vec<f32> = (0..w * h).map(|_| rng.random::<f32>() * 100.0).collect();
    let valid: Vec<bool> = (0..w * h).map(|_| rng.random::<f64>() > 0.2).collect();
    let map = DisparityMap::from_parts(w, h, disparity, valid);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.pfm");
    write_pfm(&map, &path).unwrap();
    let back = read_pfm(&path).unwrap();

    assert_eq!(back.width(), w);
    assert_eq!(back.height(), h);
    for i in 0..w * h {
        assert_eq!(map.valid()[i], back.valid()[i]);
        assert_eq!(map.disparity()[i].to_bits(), back.disparity()[i].to_bits());
    }
}

#[test]
fn pfm_rejects_empty_map() {
    let dir = tempfile::tempdir().unwrap();
    let map = DisparityMap::new(0, 0);
    assert!(matches!(
        write_pfm(&map, dir.path().join("e.pfm")),
        Err(ImageIoError::EmptyMap)
    ));
}

#[test]
fn pfm_all_invalid_is_all_nan_payload() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nan.pfm");
    let map = DisparityMap::new(3, 2);
    write_pfm(&map, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let header_len = b"Pf\n3 2\n-1.0\n".len();
    for chunk in bytes[header_len..].chunks_exact(4) {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        assert!(v.is_nan());
    }
    let back = read_pfm(&path).unwrap();
    assert_eq!(back.n_valid(), 0);
}

#[test]
fn png_16bit_value_scaling() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g16.png");
    let img = GrayImage::from_vec(2, 1, vec![1.0, 0.0]);
    write_png_gray(&img, &path, 16).unwrap();
    let back = read_png_gray(&path).unwrap();
    assert_eq!(back.at(0, 0), 1.0); // 65535 -> 1.0
    assert_eq!(back.at(1, 0), 0.0);
}

#[test]
fn png_8bit_value_scaling() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g8.png");
    let img = GrayImage::from_vec(1, 1, vec![128.0 / 255.0]);
    write_png_gray(&img, &path, 8).unwrap();
    let back = read_png_gray(&path).unwrap();
    assert!((back.at(0, 0) - 128.0 / 255.0).abs() < 1e-12);
}

#[test]
fn png_rejects_color() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("rgb.png");
    {
        let file = std::io::BufWriter::new(std::fs::File::create(&path).unwrap());
        let mut enc = png::Encoder::new(file, 1, 1);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().unwrap();
        w.write_image_data(&[1, 2, 3]).unwrap();
    }
    assert!(matches!(
        read_png_gray(&path),
        Err(ImageIoError::UnsupportedPng(_))
    ));
}

#[test]
fn missing_file_is_io_error() {
    assert!(matches!(
        read_pfm("/nonexistent/definitely/not/here.pfm"),
        Err(ImageIoError::Io(_))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// PFM round-trip is the identity on (values, mask).
    #[test]
    fn pfm_roundtrip_prop(seed in any::<u64>(), w in 1usize..12, h in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let disparity: Vec<f32> = (0..w * h).map(|_| (rng.random::<f32>() - 0.25) * 80.0).collect();
        let valid: Vec<bool> = (0..w * h).map(|_| rng.random::<f64>() > 0.3).collect();
        let map = DisparityMap::from_parts(w, h, disparity, valid);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.pfm");
        write_pfm(&map, &path).unwrap();
        let back = read_pfm(&path).unwrap();
        prop_assert_eq!(map.valid(), back.valid());
        for i in 0..w * h {
            prop_assert_eq!(map.disparity()[i].to_bits(), back.disparity()[i].to_bits());
        }
    }

    /// PNG round-trip is the identity on grid-quantized values.
    #[test]
    fn png16_roundtrip_on_grid(seed in any::<u64>(), w in 1usize..10, h in 1usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..w * h)
            .map(|_| (rng.random::<f64>() * 65535.0).round() / 65535.0)
            .collect();
        let img = GrayImage::from_vec(w, h, data);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.png");
        write_png_gray(&img, &path, 16).unwrap();
        let back = read_png_gray(&path).unwrap();
        for i in 0..w * h {
            prop_assert_eq!(img.data()[i].to_bits(), back.data()[i].to_bits());
        }
    }
}
