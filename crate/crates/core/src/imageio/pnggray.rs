//! Grayscale PNG load/save at 8 or 16 bits per sample.
//!
//! Loading normalizes by 2^bits - 1; saving quantizes with
//! round-half-away-from-zero. Color and indexed files are rejected.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use super::{GrayImage, ImageIoError};

pub fn read_png_gray(path: impl AsRef<Path>) -> Result<GrayImage, ImageIoError> {
    let decoder = png::Decoder::new(BufReader::new(File::open(path)?));
    let mut reader = decoder.read_info()?;
    let info = reader.info();
    if info.color_type != png::ColorType::Grayscale {
        return Err(ImageIoError::UnsupportedPng(format!(
            "color type {:?}, only grayscale is supported",
            info.color_type
        )));
    }
    let bit_depth = info.bit_depth;
    if bit_depth != png::BitDepth::Eight && bit_depth != png::BitDepth::Sixteen {
        return Err(ImageIoError::UnsupportedPng(format!(
            "bit depth {:?}, only 8 or 16 is supported",
            bit_depth
        )));
    }
    let mut buf = vec![0u8; reader.output_buffer_size().expect("png buffer size")];
    let frame = reader.next_frame(&mut buf)?;
    let (w, h) = (frame.width as usize, frame.height as usize);
    let mut data = Vec::with_capacity(w * h);
    match bit_depth {
        png::BitDepth::Eight => {
            for &b in &buf[..w * h] {
                data.push((b as f64 / 255.0).clamp(0.0, 1.0));
            }
        }
        _ => {
            for chunk in buf[..w * h * 2].chunks_exact(2) {
                let v = u16::from_be_bytes([chunk[0], chunk[1]]);
                data.push((v as f64 / 65535.0).clamp(0.0, 1.0));
            }
        }
    }
    Ok(GrayImage::from_vec(w, h, data))
}

pub fn write_png_gray(
    img: &GrayImage,
    path: impl AsRef<Path>,
    bitdepth: u8,
) -> Result<(), ImageIoError> {
    assert!(bitdepth == 8 || bitdepth == 16, "bitdepth must be 8 or 16");
    if img.width() == 0 || img.height() == 0 {
        return Err(ImageIoError::EmptyMap);
    }
    let file = BufWriter::new(File::create(path)?);
    let mut encoder = png::Encoder::new(file, img.width() as u32, img.height() as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(if bitdepth == 8 {
        png::BitDepth::Eight
    } else {
        png::BitDepth::Sixteen
    });
    let mut writer = encoder.write_header()?;
    let max = if bitdepth == 8 { 255.0 } else { 65535.0 };
    let quantize = |v: f64| (v * max).round().clamp(0.0, max);
    if bitdepth == 8 {
        let bytes: Vec<u8> = img.data().iter().map(|&v| quantize(v) as u8).collect();
        writer.write_image_data(&bytes)?;
    } else {
        let mut bytes = Vec::with_capacity(img.data().len() * 2);
        for &v in img.data() {
            bytes.extend_from_slice(&(quantize(v) as u16).to_be_bytes());
        }
        writer.write_image_data(&bytes)?;
    }
    Ok(())
}
