//! Dense rank-3 tensors (channels × height × width) of 64-bit floats.
//!
//! All feature maps in the pipeline are carried by this one type. Data is
//! row-major: channel-major, then row, then column, so a single channel
//! plane and a single row are both contiguous slices.

use std::fmt;

/// Shape of a rank-3 tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Shape { channels, height, width }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Spatial dimensions (height, width).
    pub fn spatial(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// Dense rank-3 tensor of f64 values.
///
/// Convolution kernels are stored as `(out_ch * in_ch, kh, kw)` tensors; the
/// flattening is out-major which matches the conventional (out, in, kh, kw)
/// layout exactly. Biases and other vectors use shape `(n, 1, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        let shape = Shape::new(channels, height, width);
        Tensor { shape, data: vec![0.0; shape.len()] }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        let shape = Shape::new(channels, height, width);
        Tensor { shape, data: vec![value; shape.len()] }
    }

    /// Wrap an existing buffer. Panics if the length does not match the shape.
    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Self {
        let shape = Shape::new(channels, height, width);
        assert_eq!(
            data.len(),
            shape.len(),
            "tensor data length {} does not match shape {}",
            data.len(),
            shape
        );
        Tensor { shape, data }
    }

    /// Scalar tensor of shape (1, 1, 1).
    pub fn scalar(value: f64) -> Self {
        Tensor::from_vec(1, 1, 1, vec![value])
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Tensor::from_vec(channels, height, width, data)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.shape.channels
    }

    pub fn height(&self) -> usize {
        self.shape.height
    }

    pub fn width(&self) -> usize {
        self.shape.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.shape.height + y) * self.shape.width + x
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, value: f64) {
        let i = self.idx(c, y, x);
        self.data[i] = value;
    }

    /// Contiguous slice of one channel plane.
    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.shape.height * self.shape.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.shape.height * self.shape.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Contiguous slice of one row of one channel.
    pub fn row(&self, c: usize, y: usize) -> &[f64] {
        let start = self.idx(c, y, 0);
        &self.data[start..start + self.shape.width]
    }

    /// Value of a scalar tensor. Panics if the tensor is not (1, 1, 1).
    pub fn item(&self) -> f64 {
        assert_eq!(self.shape.len(), 1, "item() on non-scalar tensor {}", self.shape);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination of two same-shaped tensors.
    pub fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape, other.shape, "shape mismatch in zip");
        Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Extract a spatial window covering all channels.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Tensor {
        assert!(y0 + h <= self.shape.height && x0 + w <= self.shape.width);
        let mut out = Tensor::zeros(self.shape.channels, h, w);
        for c in 0..self.shape.channels {
            for y in 0..h {
                let src = self.idx(c, y0 + y, x0);
                let dst = out.idx(c, y, 0);
                out.data[dst..dst + w].copy_from_slice(&self.data[src..src + w]);
            }
        }
        out
    }
}
