//! Forward kernels for the network operations.
//!
//! These are pure functions from tensors to tensors; the tape in
//! [`crate::autodiff`] records them and owns the matching backward rules.
//! Kernels may parallelize over output channels, but every output element is
//! computed by exactly one task with a fixed reduction order, so results are
//! bit-identical to the sequential evaluation.

use rayon::prelude::*;
use thiserror::Error;

use crate::tensor::Tensor;

/// Configuration-level failures of the tensor operations.
#[derive(Debug, Error)]
pub enum OpError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("pooling factor must be >= 1")]
    BadPoolFactor,
    #[error("dropout probability {0} outside [0, 1)")]
    BadDropoutProb(f64),
    #[error("upsample target {target_h}x{target_w} inconsistent with source {src_h}x{src_w} at factor {factor}")]
    BadUpsampleTarget { target_h: usize, target_w: usize, src_h: usize, src_w: usize, factor: usize },
    #[error("backward requires a scalar loss node, got shape {0}")]
    NonScalarLoss(String),
}

/// Zero padding mode of a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero-pad so the spatial size is preserved (odd kernels only).
    Same,
    /// No padding; output shrinks by the kernel extent.
    Valid,
}

/// Static description of a convolution layer.
///
/// Weights are carried as an `(out_ch * in_ch, kh, kw)` tensor, flattened
/// out-major; the bias is `(out_ch, 1, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub out_ch: usize,
    pub in_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub padding: Padding,
}

impl ConvSpec {
    pub fn new(out_ch: usize, in_ch: usize, kh: usize, kw: usize, padding: Padding) -> Self {
        ConvSpec { out_ch, in_ch, kh, kw, padding }
    }

    pub fn weight_shape(&self) -> (usize, usize, usize) {
        (self.out_ch * self.in_ch, self.kh, self.kw)
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        match self.padding {
            Padding::Same => (h, w),
            Padding::Valid => (h + 1 - self.kh, w + 1 - self.kw),
        }
    }

    fn check(&self, x: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<(), OpError> {
        let mismatch = |detail: String| OpError::ShapeMismatch { op: "conv2d", detail };
        if self.kh % 2 == 0 || self.kw % 2 == 0 {
            return Err(mismatch(format!("kernel {}x{} must be odd", self.kh, self.kw)));
        }
        if x.channels() != self.in_ch {
            return Err(mismatch(format!(
                "input has {} channels, kernel expects {}",
                x.channels(),
                self.in_ch
            )));
        }
        let ws = self.weight_shape();
        if (weights.channels(), weights.height(), weights.width()) != ws {
            return Err(mismatch(format!(
                "weight tensor {} does not match spec {}x{}x{}",
                weights.shape(),
                ws.0,
                ws.1,
                ws.2
            )));
        }
        if bias.channels() != self.out_ch || bias.height() != 1 || bias.width() != 1 {
            return Err(mismatch(format!(
                "bias tensor {} does not match {} output channels",
                bias.shape(),
                self.out_ch
            )));
        }
        if self.padding == Padding::Valid && (x.height() < self.kh || x.width() < self.kw) {
            return Err(mismatch(format!(
                "input {} smaller than valid-mode kernel {}x{}",
                x.shape(),
                self.kh,
                self.kw
            )));
        }
        Ok(())
    }
}

/// 2D convolution (cross-correlation) with per-output-channel bias.
pub fn conv2d(x: &Tensor, weights: &Tensor, bias: &Tensor, spec: ConvSpec) -> Result<Tensor, OpError> {
    spec.check(x, weights, bias)?;
    let (h, w) = (x.height(), x.width());
    let (oh, ow) = spec.out_dims(h, w);
    let (pad_y, pad_x) = match spec.padding {
        Padding::Same => ((spec.kh - 1) / 2, (spec.kw - 1) / 2),
        Padding::Valid => (0, 0),
    };

    let mut out = Tensor::zeros(spec.out_ch, oh, ow);
    let work = spec.out_ch * spec.in_ch * spec.kh * spec.kw * oh * ow;

    // Row bands keep the band's input slice cache-resident while every
    // output channel consumes it; each output element is still produced by
    // exactly one task with a fixed accumulation order.
    let band_rows = 16usize;
    let n_bands = oh.div_ceil(band_rows);

    let run_band = |band: usize| -> Vec<f64> {
        let oy0 = band * band_rows;
        let oy1 = (oy0 + band_rows).min(oh);
        let rows = oy1 - oy0;
        let mut buf = vec![0.0f64; spec.out_ch * rows * ow];
        for o in 0..spec.out_ch {
            let out_band = &mut buf[o * rows * ow..(o + 1) * rows * ow];
            out_band.fill(bias.data()[o]);
            for ic in 0..spec.in_ch {
                let xp = x.plane(ic);
                for ky in 0..spec.kh {
                    for kx in 0..spec.kw {
                        let wv = weights.at(o * spec.in_ch + ic, ky, kx);
                        if wv == 0.0 {
                            continue;
                        }
                        // out[y][ox] += wv * x[y + ky - pad_y][ox + kx - pad_x]
                        let ox_lo = pad_x.saturating_sub(kx);
                        let ox_hi = (w + pad_x - kx).min(ow);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let sx_lo = ox_lo + kx - pad_x;
                        for oy in oy0..oy1 {
                            let sy = oy + ky;
                            if sy < pad_y || sy - pad_y >= h {
                                continue;
                            }
                            let sy = sy - pad_y;
                            let row = (oy - oy0) * ow;
                            let dst = &mut out_band[row + ox_lo..row + ox_hi];
                            let src = &xp[sy * w + sx_lo..sy * w + sx_lo + (ox_hi - ox_lo)];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += wv * s;
                            }
                        }
                    }
                }
            }
        }
        buf
    };

    let bands: Vec<Vec<f64>> = if work > 1 << 18 {
        (0..n_bands).into_par_iter().map(run_band).collect()
    } else {
        (0..n_bands).map(run_band).collect()
    };
    for (band, buf) in bands.into_iter().enumerate() {
        let oy0 = band * band_rows;
        let rows = ((oy0 + band_rows).min(oh)) - oy0;
        for o in 0..spec.out_ch {
            let dst0 = (o * oh + oy0) * ow;
            out.data_mut()[dst0..dst0 + rows * ow]
                .copy_from_slice(&buf[o * rows * ow..(o + 1) * rows * ow]);
        }
    }
    Ok(out)
}

/// Pooling flavor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Min,
    Max,
    Avg,
}

/// Result of a pooling pass; min/max keep the winning source index per cell
/// so the backward pass can route gradients.
pub struct PoolOutput {
    pub out: Tensor,
    /// Flat source index (into the input tensor) per output element, for
    /// min/max pooling. Empty for average pooling.
    pub arg: Vec<u32>,
}

/// Block pooling by `factor`, padding ragged edges by edge replication.
pub fn pool(x: &Tensor, kind: PoolKind, factor: usize) -> Result<PoolOutput, OpError> {
    if factor == 0 {
        return Err(OpError::BadPoolFactor);
    }
    let (c, h, w) = (x.channels(), x.height(), x.width());
    let oh = h.div_ceil(factor);
    let ow = w.div_ceil(factor);
    let mut out = Tensor::zeros(c, oh, ow);
    let track_arg = kind != PoolKind::Avg;
    let mut arg = if track_arg { vec![0u32; c * oh * ow] } else { Vec::new() };

    for ch in 0..c {
        let xp = x.plane(ch);
        for oy in 0..oh {
            for ox in 0..ow {
                let cell = (ch * oh + oy) * ow + ox;
                match kind {
                    PoolKind::Avg => {
                        let mut sum = 0.0;
                        for dy in 0..factor {
                            let sy = (oy * factor + dy).min(h - 1);
                            for dx in 0..factor {
                                let sx = (ox * factor + dx).min(w - 1);
                                sum += xp[sy * w + sx];
                            }
                        }
                        out.data_mut()[cell] = sum / (factor * factor) as f64;
                    }
                    PoolKind::Min | PoolKind::Max => {
                        let mut best = f64::NAN;
                        let mut best_idx = 0usize;
                        let mut first = true;
                        for dy in 0..factor {
                            let sy = (oy * factor + dy).min(h - 1);
                            for dx in 0..factor {
                                let sx = (ox * factor + dx).min(w - 1);
                                let v = xp[sy * w + sx];
                                let better = if first {
                                    true
                                } else if kind == PoolKind::Max {
                                    v > best
                                } else {
                                    v < best
                                };
                                if better {
                                    best = v;
                                    best_idx = (ch * h + sy) * w + sx;
                                    first = false;
                                }
                            }
                        }
                        out.data_mut()[cell] = best;
                        arg[cell] = best_idx as u32;
                    }
                }
            }
        }
    }
    Ok(PoolOutput { out, arg })
}

/// Nearest-neighbor upsampling by an integer factor, cropped to a target size.
pub fn upsample_nearest(
    x: &Tensor,
    factor: usize,
    target_h: usize,
    target_w: usize,
) -> Result<Tensor, OpError> {
    if factor == 0
        || target_h.div_ceil(factor) != x.height()
        || target_w.div_ceil(factor) != x.width()
    {
        return Err(OpError::BadUpsampleTarget {
            target_h,
            target_w,
            src_h: x.height(),
            src_w: x.width(),
            factor,
        });
    }
    let c = x.channels();
    let mut out = Tensor::zeros(c, target_h, target_w);
    for ch in 0..c {
        let xp = x.plane(ch);
        let op = out.plane_mut(ch);
        for y in 0..target_h {
            let sy = y / factor;
            let src_row = &xp[sy * x.width()..(sy + 1) * x.width()];
            let dst_row = &mut op[y * target_w..(y + 1) * target_w];
            for (xx, d) in dst_row.iter_mut().enumerate() {
                *d = src_row[xx / factor];
            }
        }
    }
    Ok(out)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Tensor {
    x.map(|v| if v >= 0.0 { v } else { slope * v })
}

/// Right-derivative of leaky-ReLU (the kink at 0 takes the positive side).
#[inline]
pub fn leaky_relu_deriv(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        slope
    }
}

/// x * max(0, min(1, (x+1)/2)) + lambda * x
pub fn leaky_hardswish(x: &Tensor, lambda: f64) -> Tensor {
    x.map(|v| v * ((v + 1.0) / 2.0).clamp(0.0, 1.0) + lambda * v)
}

/// Right-derivative of leaky-hardswish at the isolated kinks (-1 and 1).
#[inline]
pub fn leaky_hardswish_deriv(x: f64, lambda: f64) -> f64 {
    if x < -1.0 {
        lambda
    } else if x < 1.0 {
        x + 0.5 + lambda
    } else {
        1.0 + lambda
    }
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

/// ln(1 + e^x), stable for large |x|.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of softplus; useful to seed rho for a wanted standard deviation.
#[inline]
pub fn softplus_inv(s: f64) -> f64 {
    assert!(s > 0.0);
    if s > 30.0 {
        s
    } else {
        s.exp_m1().ln()
    }
}

/// Inverted-dropout mask: 0 with probability p, 1/(1-p) otherwise.
///
/// Applying the mask in train mode makes mean-mode inference the plain
/// identity.
pub fn dropout_mask(
    shape: (usize, usize, usize),
    p: f64,
    rng: &mut impl rand::Rng,
) -> Result<Tensor, OpError> {
    if !(0.0..1.0).contains(&p) {
        return Err(OpError::BadDropoutProb(p));
    }
    let keep = 1.0 / (1.0 - p);
    let (c, h, w) = shape;
    let data = (0..c * h * w)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect();
    Ok(Tensor::from_vec(c, h, w, data))
}

/// Channel-axis concatenation; spatial dims must agree.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor, OpError> {
    assert!(!parts.is_empty());
    let (h, w) = (parts[0].height(), parts[0].width());
    let mut channels = 0;
    for p in parts {
        if p.height() != h || p.width() != w {
            return Err(OpError::ShapeMismatch {
                op: "concat",
                detail: format!("spatial dims {} vs {}x{}", p.shape(), h, w),
            });
        }
        channels += p.channels();
    }
    let mut data = Vec::with_capacity(channels * h * w);
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Ok(Tensor::from_vec(channels, h, w, data))
}
