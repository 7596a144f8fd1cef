//! Portable float map reader/writer.
//!
//! Grayscale PFM: ASCII header `Pf`, a `width height` line, a scale line
//! whose sign selects endianness (negative = little-endian), then 32-bit
//! float samples in bottom-to-top row order. NaN/Inf samples mark invalid
//! pixels.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{DisparityMap, GrayImage, ImageIoError};

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, msg: impl Into<String>) -> ImageIoError {
        ImageIoError::PfmParse { offset: self.pos, msg: msg.into() }
    }

    /// Next whitespace-delimited ASCII token.
    fn token(&mut self) -> Result<&'a str, ImageIoError> {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err("unexpected end of header"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .map_err(|_| self.err("non-ascii header token"))
    }

    /// Consume the single whitespace byte that terminates the header.
    fn skip_one_whitespace(&mut self) -> Result<(), ImageIoError> {
        if self.pos >= self.bytes.len() || !self.bytes[self.pos].is_ascii_whitespace() {
            return Err(self.err("missing whitespace after scale"));
        }
        self.pos += 1;
        Ok(())
    }
}

fn parse(bytes: &[u8]) -> Result<(usize, usize, Vec<f32>), ImageIoError> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.token()?;
    if magic != "Pf" {
        return Err(ImageIoError::PfmParse {
            offset: 0,
            msg: format!("expected grayscale magic 'Pf', got '{magic}'"),
        });
    }
    let width: usize = cur
        .token()?
        .parse()
        .map_err(|_| cur.err("bad width"))?;
    let height: usize = cur
        .token()?
        .parse()
        .map_err(|_| cur.err("bad height"))?;
    let scale: f64 = cur
        .token()?
        .parse()
        .map_err(|_| cur.err("bad scale"))?;
    if scale == 0.0 {
        return Err(cur.err("scale must be non-zero"));
    }
    cur.skip_one_whitespace()?;

    let n = width * height;
    let need = n * 4;
    let payload = &bytes[cur.pos..];
    if payload.len() < need {
        return Err(ImageIoError::PfmParse {
            offset: bytes.len(),
            msg: format!("truncated payload: need {need} bytes, have {}", payload.len()),
        });
    }
    let little_endian = scale < 0.0;
    let mut rows: Vec<f32> = Vec::with_capacity(n);
    for chunk in payload[..need].chunks_exact(4) {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        rows.push(if little_endian {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        });
    }
    // bottom-to-top: flip into top-down order
    let mut data = vec![0.0f32; n];
    for y in 0..height {
        let src = (height - 1 - y) * width;
        data[y * width..(y + 1) * width].copy_from_slice(&rows[src..src + width]);
    }
    Ok((width, height, data))
}

/// Read a PFM file as a disparity map; non-finite samples become invalid.
pub fn read_pfm(path: impl AsRef<Path>) -> Result<DisparityMap, ImageIoError> {
    let bytes = fs::read(path)?;
    let (w, h, data) = parse(&bytes)?;
    let valid: Vec<bool> = data.iter().map(|v| v.is_finite()).collect();
    Ok(DisparityMap::from_parts(w, h, data, valid))
}

/// Read a PFM file as a luminance image, clamped to [0, 1]; non-finite
/// samples become 0.
pub fn read_pfm_gray(path: impl AsRef<Path>) -> Result<GrayImage, ImageIoError> {
    let bytes = fs::read(path)?;
    let (w, h, data) = parse(&bytes)?;
    let data = data
        .iter()
        .map(|&v| if v.is_finite() { (v as f64).clamp(0.0, 1.0) } else { 0.0 })
        .collect();
    Ok(GrayImage::from_vec(w, h, data))
}

/// Write a disparity map as little-endian PFM; invalid pixels become NaN.
pub fn write_pfm(map: &DisparityMap, path: impl AsRef<Path>) -> Result<(), ImageIoError> {
    if map.is_empty() {
        return Err(ImageIoError::EmptyMap);
    }
    let (w, h) = (map.width(), map.height());
    let mut out = Vec::with_capacity(32 + w * h * 4);
    write!(out, "Pf\n{} {}\n-1.0\n", w, h)?;
    for y in (0..h).rev() {
        for x in 0..w {
            let v = if map.is_valid(x, y) { map.get(x, y) } else { f32::NAN };
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}
