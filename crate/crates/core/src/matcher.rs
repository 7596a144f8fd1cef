//! Coarse-to-fine hierarchical ZNCC block matcher.
//!
//! Produces the integer raw disparity map and the truncated cost volume the
//! refinement network consumes. Similarities are stored as raw ZNCC values
//! in [-1, 1]; all subpixel accuracy is left to the refiner.

use rayon::prelude::*;
use std::fs;
use std::path::Path;
use thiserror::Error;

use crate::imageio::{DisparityMap, GrayImage};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum MatcherError {
    #[error("invalid matcher config: {0}")]
    Config(String),
    #[error("left image is {lw}x{lh} but right image is {rw}x{rh}")]
    SizeMismatch { lw: usize, lh: usize, rw: usize, rh: usize },
    #[error("cost volume file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct MatchConfig {
    /// Window radius r; the correlation window is (2r+1)^2 pixels.
    pub radius: usize,
    /// Pyramid levels; level 0 is full resolution.
    pub levels: usize,
    /// Search half-range around the upsampled estimate at refined levels.
    pub half_range: usize,
    /// Maximum disparity in pixels at full resolution.
    pub d_max: usize,
    /// Epsilon in the ZNCC denominator.
    pub eps: f64,
    /// Windows with standard deviation below this are treated as textureless.
    pub std_floor: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig {
            radius: 3,
            levels: 3,
            half_range: 2,
            d_max: 72,
            eps: 1e-9,
            std_floor: 1e-4,
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<(), MatcherError> {
        if self.levels < 1 {
            return Err(MatcherError::Config("levels must be >= 1".into()));
        }
        if self.d_max < 1 {
            return Err(MatcherError::Config("d_max must be >= 1".into()));
        }
        if self.radius < 1 {
            return Err(MatcherError::Config("radius must be >= 1".into()));
        }
        Ok(())
    }
}

struct WindowStats {
    zncc: f64,
    std_left: f64,
    std_right: f64,
}

fn zncc_stats(
    left: &GrayImage,
    right: &GrayImage,
    x: usize,
    y: usize,
    d: i64,
    radius: usize,
    eps: f64,
) -> WindowStats {
    let r = radius as isize;
    let (xl, yl) = (x as isize, y as isize);
    let xr = xl - d as isize;
    let n = ((2 * r + 1) * (2 * r + 1)) as f64;

    let mut sum_l = 0.0;
    let mut sum_r = 0.0;
    for dy in -r..=r {
        for dx in -r..=r {
            sum_l += left.at_clamped(xl + dx, yl + dy);
            sum_r += right.at_clamped(xr + dx, yl + dy);
        }
    }
    let mean_l = sum_l / n;
    let mean_r = sum_r / n;

    let mut cross = 0.0;
    let mut var_l = 0.0;
    let mut var_r = 0.0;
    for dy in -r..=r {
        for dx in -r..=r {
            let a = left.at_clamped(xl + dx, yl + dy) - mean_l;
            let b = right.at_clamped(xr + dx, yl + dy) - mean_r;
            cross += a * b;
            var_l += a * a;
            var_r += b * b;
        }
    }
    WindowStats {
        zncc: cross / (var_l.sqrt() * var_r.sqrt() + eps),
        std_left: (var_l / n).sqrt(),
        std_right: (var_r / n).sqrt(),
    }
}

/// Zero-mean normalized cross-correlation of the (2r+1)^2 windows centered
/// at (x, y) in the left image and (x - d, y) in the right image. Window
/// coordinates are clamped to the image borders. Degenerate constant
/// windows score ~0 through the epsilon.
pub fn zncc(
    left: &GrayImage,
    right: &GrayImage,
    x: usize,
    y: usize,
    d: i64,
    radius: usize,
    eps: f64,
) -> f64 {
    zncc_stats(left, right, x, y, d, radius, eps).zncc
}

/// Average 2x2 downsampling with edge replication on ragged borders; the
/// pyramid construction step.
pub fn downsample_half(img: &GrayImage) -> GrayImage {
    let (w, h) = (img.width(), img.height());
    let (ow, oh) = (w.div_ceil(2), h.div_ceil(2));
    let mut out = GrayImage::new(ow, oh);
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for dy in 0..2 {
                for dx in 0..2 {
                    let sx = (2 * x + dx).min(w - 1);
                    let sy = (2 * y + dy).min(h - 1);
                    acc += img.at(sx, sy);
                }
            }
            out.set(x, y, acc * 0.25);
        }
    }
    out
}

/// Per-pixel result of one matching level.
#[derive(Clone, Copy)]
struct PixelMatch {
    d: i64,
    ok: bool,
}

/// Search the candidate range [lo, hi] (clipped to stay inside the right
/// image) for the best ZNCC at (x, y); ties break toward smaller disparity.
fn search_pixel(
    left: &GrayImage,
    right: &GrayImage,
    x: usize,
    y: usize,
    lo: i64,
    hi: i64,
    radius: usize,
    eps: f64,
    std_floor: f64,
) -> PixelMatch {
    let hi = hi.min(x as i64);
    if hi < lo {
        return PixelMatch { d: 0, ok: false };
    }
    let mut best = f64::NEG_INFINITY;
    let mut best_d = lo;
    let mut best_textured = false;
    for d in lo..=hi {
        let s = zncc_stats(left, right, x, y, d, radius, eps);
        if s.zncc > best {
            best = s.zncc;
            best_d = d;
            best_textured = s.std_left >= std_floor && s.std_right >= std_floor;
        }
    }
    PixelMatch { d: best_d, ok: best_textured && best >= 0.0 }
}

/// Coarse-to-fine integer disparity estimation.
///
/// The coarsest level searches [0, d_max >> (levels-1)] exhaustively; each
/// finer level searches around the doubled coarse estimate. Pixels whose
/// best similarity is negative, whose windows are textureless, or whose
/// candidate range leaves the right image are invalidated at full
/// resolution.
pub fn match_hierarchical(
    left: &GrayImage,
    right: &GrayImage,
    config: &MatchConfig,
) -> Result<DisparityMap, MatcherError> {
    config.validate()?;
    if left.width() != right.width() || left.height() != right.height() {
        return Err(MatcherError::SizeMismatch {
            lw: left.width(),
            lh: left.height(),
            rw: right.width(),
            rh: right.height(),
        });
    }

    let mut pyr_l = vec![left.clone()];
    let mut pyr_r = vec![right.clone()];
    for _ in 1..config.levels {
        pyr_l.push(downsample_half(pyr_l.last().unwrap()));
        pyr_r.push(downsample_half(pyr_r.last().unwrap()));
    }

    let d_max_at = |level: usize| -> i64 { (config.d_max as i64 + (1 << level) - 1) >> level };

    let mut prev: Option<Vec<PixelMatch>> = None;
    for level in (0..config.levels).rev() {
        let lv_l = &pyr_l[level];
        let lv_r = &pyr_r[level];
        let (w, h) = (lv_l.width(), lv_l.height());
        let dm = d_max_at(level);
        let prev_ref = prev.as_ref();
        let prev_w = if level + 1 < config.levels {
            pyr_l[level + 1].width()
        } else {
            0
        };

        let rows: Vec<Vec<PixelMatch>> = (0..h)
            .into_par_iter()
            .map(|y| {
                let mut row = Vec::with_capacity(w);
                for x in 0..w {
                    let m = match prev_ref {
                        None => search_pixel(
                            lv_l,
                            lv_r,
                            x,
                            y,
                            0,
                            dm,
                            config.radius,
                            config.eps,
                            config.std_floor,
                        ),
                        Some(coarse) => {
                            let cm = coarse[(y / 2) * prev_w + x / 2];
                            if cm.ok {
                                let center = 2 * cm.d;
                                let lo = (center - config.half_range as i64).max(0);
                                let hi = (center + config.half_range as i64).min(dm);
                                search_pixel(
                                    lv_l,
                                    lv_r,
                                    x,
                                    y,
                                    lo,
                                    hi,
                                    config.radius,
                                    config.eps,
                                    config.std_floor,
                                )
                            } else {
                                // no usable coarse estimate: fall back to an
                                // exhaustive search at this level
                                search_pixel(
                                    lv_l,
                                    lv_r,
                                    x,
                                    y,
                                    0,
                                    dm,
                                    config.radius,
                                    config.eps,
                                    config.std_floor,
                                )
                            }
                        }
                    };
                    row.push(m);
                }
                row
            })
            .collect();
        prev = Some(rows.into_iter().flatten().collect());
    }

    let full = prev.expect("at least one level");
    let (w, h) = (left.width(), left.height());
    let mut map = DisparityMap::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let m = full[y * w + x];
            if m.ok {
                map.set(x, y, m.d as f32);
            }
        }
    }
    Ok(map)
}

/// The network inputs: ZNCC similarity slices around the raw disparity and
/// the support indicator marking which entries are in range.
#[derive(Debug, Clone)]
pub struct TruncatedCostVolume {
    /// Half-width K; the volume has 2K+1 slices.
    pub k: usize,
    /// ZNCC similarities, zero outside the support, shape (2K+1, H, W).
    pub slices: Tensor,
    /// {0, 1} support indicator, same shape.
    pub chi: Tensor,
}

impl TruncatedCostVolume {
    pub fn n_slices(&self) -> usize {
        2 * self.k + 1
    }
}

/// Slice the full cost volume at offsets [-K, K] around the raw disparity.
///
/// For each pixel and offset k: if the raw disparity is valid and d + k lies
/// in [0, d_max], the slice holds the ZNCC similarity at d + k and chi is 1;
/// otherwise both are 0.
pub fn truncate_volume(
    left: &GrayImage,
    right: &GrayImage,
    raw: &DisparityMap,
    k: usize,
    radius: usize,
    d_max: usize,
    eps: f64,
) -> TruncatedCostVolume {
    let (w, h) = (raw.width(), raw.height());
    let n_slices = 2 * k + 1;
    let mut slices = Tensor::zeros(n_slices, h, w);
    let mut chi = Tensor::zeros(n_slices, h, w);

    let plane = h * w;
    let slice_data: Vec<(Vec<f64>, Vec<f64>)> = (0..n_slices)
        .into_par_iter()
        .map(|kk| {
            let offset = kk as i64 - k as i64;
            let mut s = vec![0.0; plane];
            let mut c = vec![0.0; plane];
            for y in 0..h {
                for x in 0..w {
                    if !raw.is_valid(x, y) {
                        continue;
                    }
                    let d = raw.get(x, y).round() as i64 + offset;
                    if d < 0 || d > d_max as i64 {
                        continue;
                    }
                    s[y * w + x] = zncc(left, right, x, y, d, radius, eps);
                    c[y * w + x] = 1.0;
                }
            }
            (s, c)
        })
        .collect();
    for (kk, (s, c)) in slice_data.into_iter().enumerate() {
        slices.data_mut()[kk * plane..(kk + 1) * plane].copy_from_slice(&s);
        chi.data_mut()[kk * plane..(kk + 1) * plane].copy_from_slice(&c);
    }
    TruncatedCostVolume { k, slices, chi }
}

pub const COST_VOLUME_MAGIC: &[u8; 8] = b"SDCV0001";

/// Write the truncated volume: magic, u32 (K, H, W) little-endian, then the
/// slice planes and the chi planes as little-endian f32.
pub fn write_cost_volume(
    cv: &TruncatedCostVolume,
    path: impl AsRef<Path>,
) -> Result<(), MatcherError> {
    let shape = cv.slices.shape();
    let mut out =
        Vec::with_capacity(8 + 12 + 4 * (cv.slices.len() + cv.chi.len()));
    out.extend_from_slice(COST_VOLUME_MAGIC);
    out.extend_from_slice(&(cv.k as u32).to_le_bytes());
    out.extend_from_slice(&(shape.height as u32).to_le_bytes());
    out.extend_from_slice(&(shape.width as u32).to_le_bytes());
    for &v in cv.slices.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    for &v in cv.chi.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_cost_volume(path: impl AsRef<Path>) -> Result<TruncatedCostVolume, MatcherError> {
    let bytes = fs::read(path)?;
    if bytes.len() < 20 || &bytes[0..8] != COST_VOLUME_MAGIC {
        return Err(MatcherError::Format("bad magic".into()));
    }
    let rd_u32 = |o: usize| u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
    let k = rd_u32(8) as usize;
    let h = rd_u32(12) as usize;
    let w = rd_u32(16) as usize;
    let n = (2 * k + 1) * h * w;
    let need = 20 + 8 * n;
    if bytes.len() != need {
        return Err(MatcherError::Format(format!(
            "expected {need} bytes for K={k} {h}x{w}, found {}",
            bytes.len()
        )));
    }
    let mut vals = Vec::with_capacity(2 * n);
    for chunk in bytes[20..].chunks_exact(4) {
        vals.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64);
    }
    let slices = Tensor::from_vec(2 * k + 1, h, w, vals[..n].to_vec());
    let chi = Tensor::from_vec(2 * k + 1, h, w, vals[n..].to_vec());
    Ok(TruncatedCostVolume { k, slices, chi })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(w: usize, h: usize, data: Vec<f64>) -> GrayImage {
        GrayImage::from_vec(w, h, data)
    }

    #[test]
    fn zncc_identical_windows_is_one() {
        let a = img(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let v = zncc(&a, &a, 0, 0, 0, 1, 1e-9);
        assert!((v - 1.0).abs() < 1e-9, "{v}");
    }

    #[test]
    fn zncc_is_gain_bias_invariant() {
        let a = img(3, 3, vec![0.3, 2.7, 1.2, 2.1, 0.6, 2.4, 0.9, 1.8, 1.5]);
        let b = img(3, 3, a.data().iter().map(|v| 2.0 * v + 5.0).collect());
        let v = zncc(&a, &b, 1, 1, 0, 1, 1e-9);
        assert!((v - 1.0).abs() < 1e-9, "{v}");
    }

    #[test]
    fn zncc_negated_window_is_minus_one() {
        let a = img(3, 3, vec![0.3, 2.7, 1.2, 2.1, 0.6, 2.4, 0.9, 1.8, 1.5]);
        let mean = a.data().iter().sum::<f64>() / 9.0;
        let b = img(3, 3, a.data().iter().map(|v| 2.0 * mean - v).collect());
        let v = zncc(&a, &b, 1, 1, 0, 1, 1e-9);
        assert!((v + 1.0).abs() < 1e-9, "{v}");
    }

    #[test]
    fn zncc_constant_windows_score_zero() {
        let a = img(3, 3, vec![0.5; 9]);
        let v = zncc(&a, &a, 1, 1, 0, 1, 1e-9);
        assert_eq!(v, 0.0);
    }

    #[test]
    fn constant_pair_is_fully_invalid() {
        let a = img(32, 32, vec![0.5; 1024]);
        let cfg = MatchConfig { d_max: 8, ..Default::default() };
        let map = match_hierarchical(&a, &a, &cfg).unwrap();
        assert_eq!(map.n_valid(), 0);
    }

    #[test]
    fn unequal_sizes_rejected() {
        let a = img(4, 4, vec![0.0; 16]);
        let b = img(5, 4, vec![0.0; 20]);
        assert!(matches!(
            match_hierarchical(&a, &b, &MatchConfig::default()),
            Err(MatcherError::SizeMismatch { .. })
        ));
    }

    #[test]
    fn chi_boundaries_follow_support_rule() {
        // gradient texture so the matcher has something to chew on
        let w = 16;
        let base: Vec<f64> = (0..w * 4).map(|i| (i as f64 * 0.37).sin() * 0.5 + 0.5).collect();
        let left = img(w, 4, base.clone());
        let right = left.clone();

        // d = 4 with d_max = 5, K = 2: chi over k=-2..2 is [1,1,1,1,0]
        let mut raw = DisparityMap::new(w, 4);
        raw.set(8, 2, 4.0);
        let cv = truncate_volume(&left, &right, &raw, 2, 1, 5, 1e-9);
        let got: Vec<f64> = (0..5).map(|kk| cv.chi.at(kk, 2, 8)).collect();
        assert_eq!(got, vec![1.0, 1.0, 1.0, 1.0, 0.0]);

        // d = 0: chi = [0,0,1,1,1]
        let mut raw = DisparityMap::new(w, 4);
        raw.set(8, 1, 0.0);
        let cv = truncate_volume(&left, &right, &raw, 2, 1, 5, 1e-9);
        let got: Vec<f64> = (0..5).map(|kk| cv.chi.at(kk, 1, 8)).collect();
        assert_eq!(got, vec![0.0, 0.0, 1.0, 1.0, 1.0]);

        // invalid pixels get all-zero slices and chi
        for kk in 0..5 {
            assert_eq!(cv.chi.at(kk, 0, 3), 0.0);
            assert_eq!(cv.slices.at(kk, 0, 3), 0.0);
        }
    }

    #[test]
    fn chi_mask_zeroes_slices() {
        let w = 24;
        let data: Vec<f64> = (0..w * 8).map(|i| ((i * 7901) % 97) as f64 / 97.0).collect();
        let left = img(w, 8, data);
        let right = left.clone();
        let mut raw = DisparityMap::new(w, 8);
        for y in 0..8 {
            for x in 0..w {
                raw.set(x, y, (x % 3) as f32);
            }
        }
        let cv = truncate_volume(&left, &right, &raw, 3, 1, 4, 1e-9);
        for i in 0..cv.slices.len() {
            let s = cv.slices.data()[i];
            let c = cv.chi.data()[i];
            assert!(c == 0.0 || c == 1.0);
            if c == 0.0 {
                assert_eq!(s, 0.0);
            } else {
                assert!((-1.0 - 1e-6..=1.0).contains(&s));
            }
        }
    }

    #[test]
    fn cost_volume_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cv.sdcv");
        let slices = Tensor::from_fn(3, 4, 5, |c, y, x| (c * 20 + y * 5 + x) as f64 * 0.015625);
        let chi = Tensor::from_fn(3, 4, 5, |c, _, x| ((c + x) % 2) as f64);
        let cv = TruncatedCostVolume { k: 1, slices, chi };
        write_cost_volume(&cv, &path).unwrap();
        let back = read_cost_volume(&path).unwrap();
        assert_eq!(back.k, 1);
        assert_eq!(back.slices.data(), cv.slices.data());
        assert_eq!(back.chi.data(), cv.chi.data());
    }

    #[test]
    fn cost_volume_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.sdcv");
        fs::write(&path, b"NOTMAGIC\0\0\0\0\0\0\0\0\0\0\0\0").unwrap();
        assert!(matches!(read_cost_volume(&path), Err(MatcherError::Format(_))));
    }
}
