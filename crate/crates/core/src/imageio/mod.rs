//! Image and disparity-map containers plus the file formats the pipeline
//! exchanges: PFM for float maps, PNG for 8/16-bit grayscale frames.

mod pfm;
mod pnggray;

pub use pfm::{read_pfm, read_pfm_gray, write_pfm};
pub use pnggray::{read_png_gray, write_png_gray};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageIoError {
    #[error("pfm parse error at byte {offset}: {msg}")]
    PfmParse { offset: usize, msg: String },
    #[error("cannot write an empty (0x0) map")]
    EmptyMap,
    #[error("unsupported png: {0}")]
    UnsupportedPng(String),
    #[error("png decode: {0}")]
    PngDecode(#[from] png::DecodingError),
    #[error("png encode: {0}")]
    PngEncode(#[from] png::EncodingError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Single-channel luminance image. Loaders clamp to [0, 1]; in-memory
/// constructions (e.g. gain/bias perturbed frames) may exceed the range.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        GrayImage { width, height, data: vec![0.0; width * height] }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height);
        GrayImage { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    /// Sample with coordinates clamped to the image border (edge replication).
    #[inline]
    pub fn at_clamped(&self, x: isize, y: isize) -> f64 {
        let xc = x.clamp(0, self.width as isize - 1) as usize;
        let yc = y.clamp(0, self.height as isize - 1) as usize;
        self.at(xc, yc)
    }

    /// Bilinear sample at a fractional position, clamped to the border.
    /// Exact at integer positions.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> f64 {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let x0 = x0 as isize;
        let y0 = y0 as isize;
        if fx == 0.0 && fy == 0.0 {
            return self.at_clamped(x0, y0);
        }
        let v00 = self.at_clamped(x0, y0);
        let v10 = self.at_clamped(x0 + 1, y0);
        let v01 = self.at_clamped(x0, y0 + 1);
        let v11 = self.at_clamped(x0 + 1, y0 + 1);
        let top = v00 * (1.0 - fx) + v10 * fx;
        let bot = v01 * (1.0 - fx) + v11 * fx;
        top * (1.0 - fy) + bot * fy
    }
}

/// Per-pixel disparity with a validity mask. Invalid pixels carry 0.
///
/// Values are f32: PFM is the interchange format and everything written or
/// read passes through 32-bit floats anyway.
#[derive(Debug, Clone, PartialEq)]
pub struct DisparityMap {
    width: usize,
    height: usize,
    disparity: Vec<f32>,
    valid: Vec<bool>,
}

impl DisparityMap {
    /// All-invalid map.
    pub fn new(width: usize, height: usize) -> Self {
        DisparityMap {
            width,
            height,
            disparity: vec![0.0; width * height],
            valid: vec![false; width * height],
        }
    }

    pub fn constant(width: usize, height: usize, d: f32) -> Self {
        DisparityMap {
            width,
            height,
            disparity: vec![d; width * height],
            valid: vec![true; width * height],
        }
    }

    pub fn from_parts(width: usize, height: usize, disparity: Vec<f32>, valid: Vec<bool>) -> Self {
        assert_eq!(disparity.len(), width * height);
        assert_eq!(valid.len(), width * height);
        let mut m = DisparityMap { width, height, disparity, valid };
        for i in 0..m.disparity.len() {
            if !m.valid[i] {
                m.disparity[i] = 0.0;
            }
        }
        m
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.disparity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.disparity.is_empty()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.disparity[y * self.width + x]
    }

    #[inline]
    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.valid[y * self.width + x]
    }

    /// Set a valid disparity value.
    #[inline]
    pub fn set(&mut self, x: usize, y: usize, d: f32) {
        let i = y * self.width + x;
        self.disparity[i] = d;
        self.valid[i] = true;
    }

    /// Invalidate a pixel (disparity forced to 0).
    #[inline]
    pub fn invalidate(&mut self, x: usize, y: usize) {
        let i = y * self.width + x;
        self.disparity[i] = 0.0;
        self.valid[i] = false;
    }

    pub fn disparity(&self) -> &[f32] {
        &self.disparity
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}
