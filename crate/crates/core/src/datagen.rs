//! Procedural generator of rectified active-stereo pairs with subpixel
//! ground truth.
//!
//! A scene is a smooth random height field composited with fronto-parallel
//! boxes and slanted planes (per-pixel max: the nearest surface wins). The
//! left frame is a blurred speckle pattern modulated by a low-frequency
//! albedo field; the right frame is a forward warp of the left scene with a
//! z-buffer, so occlusions fall out of the geometry. Everything is a pure
//! function of (seed, config).

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

use crate::imageio::{write_pfm, write_png_gray, DisparityMap, GrayImage, ImageIoError};
use crate::rng::{derive_seed, stream_rng};

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("invalid scene config: {0}")]
    Config(String),
    #[error("manifest parse error at line {line}: {msg}")]
    ManifestParse { line: usize, msg: String },
    #[error(transparent)]
    Image(#[from] ImageIoError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Scene and sensor parameters for one generated stereo pair.
#[derive(Debug, Clone)]
pub struct SceneConfig {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub d_min: f64,
    pub d_max: f64,
    pub n_planes: usize,
    pub n_boxes: usize,
    pub n_bumps: usize,
    /// Fraction of lit pixels in the raw speckle field, in (0, 1).
    pub speckle_density: f64,
    /// Gaussian blur applied to the speckle dots, in pixels.
    pub speckle_blur_sigma: f64,
    /// Additive Gaussian sensor noise, in luminance units.
    pub noise_sigma: f64,
    /// Multiplicative gain applied to the right frame only.
    pub gain_range: (f64, f64),
    /// Additive bias applied to the right frame only.
    pub bias_range: (f64, f64),
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            seed: 0,
            width: 256,
            height: 256,
            d_min: 8.0,
            d_max: 72.0,
            n_planes: 2,
            n_boxes: 3,
            n_bumps: 5,
            speckle_density: 0.25,
            speckle_blur_sigma: 0.75,
            noise_sigma: 0.01,
            gain_range: (0.85, 1.15),
            bias_range: (-0.04, 0.04),
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), DatagenError> {
        if self.width == 0 || self.height == 0 {
            return Err(DatagenError::Config("width and height must be positive".into()));
        }
        if !(self.d_min >= 0.0 && self.d_min < self.d_max) {
            return Err(DatagenError::Config(format!(
                "require 0 <= d_min < d_max, got d_min {} d_max {}",
                self.d_min, self.d_max
            )));
        }
        if self.d_max >= self.width as f64 {
            return Err(DatagenError::Config(format!(
                "d_max {} must be smaller than the image width {}",
                self.d_max, self.width
            )));
        }
        if !(self.speckle_density > 0.0 && self.speckle_density < 1.0) {
            return Err(DatagenError::Config(format!(
                "speckle density {} outside (0, 1)",
                self.speckle_density
            )));
        }
        if self.gain_range.0 > self.gain_range.1 || self.bias_range.0 > self.bias_range.1 {
            return Err(DatagenError::Config("empty gain or bias range".into()));
        }
        Ok(())
    }
}

/// One rendered training sample.
#[derive(Debug, Clone)]
pub struct SamplePair {
    pub left: GrayImage,
    pub right: GrayImage,
    /// Subpixel ground truth; occluded pixels are invalid.
    pub gt: DisparityMap,
    /// True where the left pixel has no visible counterpart in the right view.
    pub occlusion: Vec<bool>,
}

/// Scene primitive for the disparity relief.
#[derive(Debug, Clone)]
pub enum Primitive {
    /// Fronto-parallel rectangle at constant disparity.
    Box { x0: usize, y0: usize, x1: usize, y1: usize, d: f64 },
    /// Slanted rectangle: d(x, y) = d + gx * (x - x0) + gy * (y - y0).
    Plane { x0: usize, y0: usize, x1: usize, y1: usize, d: f64, gx: f64, gy: f64 },
    /// Smooth Gaussian bump added to the background field.
    Bump { cx: f64, cy: f64, sigma: f64, amplitude: f64 },
}

const STREAM_SPECKLE: u64 = 1;
const STREAM_SCENE: u64 = 2;
const STREAM_ALBEDO: u64 = 3;
const STREAM_NOISE: u64 = 4;
const STREAM_PHOTO: u64 = 5;
const STREAM_FILL: u64 = 6;

/// Bernoulli dot field convolved with a Gaussian, renormalized to [0, 1].
pub fn speckle_pattern(
    seed: u64,
    width: usize,
    height: usize,
    density: f64,
    blur_sigma: f64,
) -> GrayImage {
    let mut rng = stream_rng(seed, STREAM_SPECKLE);
    let mut img = GrayImage::new(width, height);
    for v in img.data_mut() {
        *v = if rng.random::<f64>() < density { 1.0 } else { 0.0 };
    }
    if blur_sigma > 0.0 {
        img = gaussian_blur(&img, blur_sigma);
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in img.data() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi - lo > 1e-12 {
        for v in img.data_mut() {
            *v = (*v - lo) / (hi - lo);
        }
    }
    img
}

fn gaussian_blur(img: &GrayImage, sigma: f64) -> GrayImage {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    for i in -radius..=radius {
        kernel.push((-0.5 * (i as f64 / sigma).powi(2)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= norm;
    }
    let (w, h) = (img.width(), img.height());
    // horizontal then vertical pass, edge clamped
    let mut tmp = GrayImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let sx = x as isize + ki as isize - radius;
                acc += k * img.at_clamped(sx, y as isize);
            }
            tmp.set(x, y, acc);
        }
    }
    let mut out = GrayImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let sy = y as isize + ki as isize - radius;
                acc += k * tmp.at_clamped(x as isize, sy);
            }
            out.set(x, y, acc);
        }
    }
    out
}

/// Background disparity level: a quarter of the way up the range.
fn background_level(d_min: f64, d_max: f64) -> f64 {
    d_min + 0.25 * (d_max - d_min)
}

/// Composite a primitive list over the flat background via per-pixel max
/// (larger disparity = nearer surface wins), clamped to [d_min, d_max].
/// Output is dense (all pixels valid) and continuous-valued.
pub fn disparity_from_primitives(
    width: usize,
    height: usize,
    primitives: &[Primitive],
    d_min: f64,
    d_max: f64,
) -> DisparityMap {
    let base = background_level(d_min, d_max);
    let mut field = vec![base; width * height];
    // bumps deform the background itself
    for p in primitives {
        if let Primitive::Bump { cx, cy, sigma, amplitude } = p {
            for y in 0..height {
                for x in 0..width {
                    let dx = x as f64 - cx;
                    let dy = y as f64 - cy;
                    field[y * width + x] +=
                        amplitude * (-0.5 * (dx * dx + dy * dy) / (sigma * sigma)).exp();
                }
            }
        }
    }
    // boxes and planes occlude whatever is behind them
    for p in primitives {
        match *p {
            Primitive::Box { x0, y0, x1, y1, d } => {
                for y in y0..y1.min(height) {
                    for x in x0..x1.min(width) {
                        let f = &mut field[y * width + x];
                        *f = f.max(d);
                    }
                }
            }
            Primitive::Plane { x0, y0, x1, y1, d, gx, gy } => {
                for y in y0..y1.min(height) {
                    for x in x0..x1.min(width) {
                        let v = d + gx * (x - x0) as f64 + gy * (y - y0) as f64;
                        let f = &mut field[y * width + x];
                        *f = f.max(v);
                    }
                }
            }
            Primitive::Bump { .. } => {}
        }
    }
    let disparity: Vec<f32> = field
        .iter()
        .map(|&v| v.clamp(d_min, d_max) as f32)
        .collect();
    DisparityMap::from_parts(width, height, disparity, vec![true; width * height])
}

/// Draw a random primitive list and composite it.
pub fn gen_disparity(config: &SceneConfig) -> DisparityMap {
    let mut rng = stream_rng(config.seed, STREAM_SCENE);
    let (w, h) = (config.width as f64, config.height as f64);
    let span = config.d_max - config.d_min;
    let mut prims = Vec::new();
    for _ in 0..config.n_bumps {
        prims.push(Primitive::Bump {
            cx: rng.random::<f64>() * w,
            cy: rng.random::<f64>() * h,
            sigma: (0.06 + 0.2 * rng.random::<f64>()) * w,
            amplitude: (rng.random::<f64>() - 0.35) * 0.55 * span,
        });
    }
    fn rand_rect(
        rng: &mut rand_chacha::ChaCha8Rng,
        cfg: &SceneConfig,
        min_frac: f64,
        max_frac: f64,
    ) -> (usize, usize, usize, usize) {
        let w = cfg.width as f64;
        let h = cfg.height as f64;
        let rw = ((min_frac + (max_frac - min_frac) * rng.random::<f64>()) * w) as usize;
        let rh = ((min_frac + (max_frac - min_frac) * rng.random::<f64>()) * h) as usize;
        let x0 = rng.random_range(0..cfg.width.saturating_sub(rw).max(1));
        let y0 = rng.random_range(0..cfg.height.saturating_sub(rh).max(1));
        (x0, y0, x0 + rw.max(2), y0 + rh.max(2))
    }
    for _ in 0..config.n_boxes {
        let (x0, y0, x1, y1) = rand_rect(&mut rng, config, 0.1, 0.35);
        let d = config.d_min + (0.45 + 0.55 * rng.random::<f64>()) * span;
        prims.push(Primitive::Box { x0, y0, x1, y1, d });
    }
    for _ in 0..config.n_planes {
        let (x0, y0, x1, y1) = rand_rect(&mut rng, config, 0.15, 0.4);
        let d = config.d_min + (0.4 + 0.4 * rng.random::<f64>()) * span;
        let gx = (rng.random::<f64>() - 0.5) * 0.2;
        let gy = (rng.random::<f64>() - 0.5) * 0.2;
        prims.push(Primitive::Plane { x0, y0, x1, y1, d, gx, gy });
    }
    disparity_from_primitives(config.width, config.height, &prims, config.d_min, config.d_max)
}

fn albedo_field(seed: u64, width: usize, height: usize) -> GrayImage {
    let mut rng = stream_rng(seed, STREAM_ALBEDO);
    let (w, h) = (width as f64, height as f64);
    let n = 4;
    let bumps: Vec<(f64, f64, f64, f64)> = (0..n)
        .map(|_| {
            (
                rng.random::<f64>() * w,
                rng.random::<f64>() * h,
                (0.15 + 0.35 * rng.random::<f64>()) * w,
                (rng.random::<f64>() - 0.5) * 0.6,
            )
        })
        .collect();
    let mut img = GrayImage::new(width, height);
    for y in 0..height {
        for x in 0..width {
            let mut v = 1.0;
            for &(cx, cy, sigma, amp) in &bumps {
                let dx = x as f64 - cx;
                let dy = y as f64 - cy;
                v += amp * (-0.5 * (dx * dx + dy * dy) / (sigma * sigma)).exp();
            }
            img.set(x, y, v.clamp(0.35, 1.0));
        }
    }
    img
}

/// Forward-warp the left scene into the right view and derive occlusions.
///
/// The continuous left-view disparity is rasterized row-wise into right-view
/// segments under a z-buffer (larger disparity wins); a left pixel is
/// occluded when the z-buffer at its landing position holds a nearer
/// surface, i.e. left-right consistency of the synthetic geometry fails.
pub fn render_pair(gt: &DisparityMap, config: &SceneConfig) -> SamplePair {
    let (w, h) = (config.width, config.height);
    assert_eq!(gt.width(), w);
    assert_eq!(gt.height(), h);

    let speckle = speckle_pattern(
        derive_seed(config.seed, STREAM_PHOTO),
        w,
        h,
        config.speckle_density,
        config.speckle_blur_sigma,
    );
    let albedo = albedo_field(config.seed, w, h);
    let mut left = GrayImage::new(w, h);
    for i in 0..w * h {
        left.data_mut()[i] = speckle.data()[i] * albedo.data()[i];
    }
    // independent texture for right-view disocclusions
    let fill = speckle_pattern(
        derive_seed(config.seed, STREAM_FILL),
        w,
        h,
        config.speckle_density,
        config.speckle_blur_sigma,
    );

    let mut right = GrayImage::new(w, h);
    let mut occlusion = vec![false; w * h];
    let mut gt_out = gt.clone();

    for y in 0..h {
        // rasterize left-view segments into right-view disparity with z-buffer
        let mut dr = vec![f64::NEG_INFINITY; w];
        for x in 0..w.saturating_sub(1) {
            let d0 = gt.get(x, y) as f64;
            let d1 = gt.get(x + 1, y) as f64;
            let xr0 = x as f64 - d0;
            let xr1 = (x + 1) as f64 - d1;
            if xr1 <= xr0 + 1e-9 {
                continue; // folded segment: fully occluded by construction
            }
            let j0 = xr0.ceil().max(0.0) as usize;
            let j1 = xr1.floor().min(w as f64 - 1.0);
            if j1 < 0.0 {
                continue;
            }
            for j in j0..=j1 as usize {
                let t = (j as f64 - xr0) / (xr1 - xr0);
                let dj = d0 + t * (d1 - d0);
                if dj > dr[j] {
                    dr[j] = dj;
                }
            }
        }

        for j in 0..w {
            if dr[j].is_finite() {
                right.set(j, y, sample_row_bilinear(&left, j as f64 + dr[j], y));
            } else {
                right.set(j, y, 0.8 * fill.at(j, y) * albedo.at(j, y));
            }
        }

        for x in 0..w {
            let d = gt.get(x, y) as f64;
            let xr = x as f64 - d;
            let visible = if xr < -0.5 {
                false
            } else {
                let j = (xr.round().max(0.0) as usize).min(w - 1);
                dr[j].is_finite() && dr[j] <= d + 0.75
            };
            if !visible {
                occlusion[y * w + x] = true;
                gt_out.invalidate(x, y);
            }
        }
    }

    // photometric perturbations: sensor noise on both frames, then gain and
    // bias on the right frame only
    let mut noise_rng = stream_rng(config.seed, STREAM_NOISE);
    if config.noise_sigma > 0.0 {
        for v in left.data_mut() {
            let e: f64 = noise_rng.sample(StandardNormal);
            *v += config.noise_sigma * e;
        }
        for v in right.data_mut() {
            let e: f64 = noise_rng.sample(StandardNormal);
            *v += config.noise_sigma * e;
        }
    }
    let gain = config.gain_range.0
        + (config.gain_range.1 - config.gain_range.0) * noise_rng.random::<f64>();
    let bias = config.bias_range.0
        + (config.bias_range.1 - config.bias_range.0) * noise_rng.random::<f64>();
    if gain != 1.0 || bias != 0.0 {
        for v in right.data_mut() {
            *v = gain * *v + bias;
        }
    }

    SamplePair { left, right, gt: gt_out, occlusion }
}

/// Horizontal-only bilinear sample (rectified geometry: rows map to rows).
fn sample_row_bilinear(img: &GrayImage, x: f64, y: usize) -> f64 {
    let x0 = x.floor();
    let fx = x - x0;
    let xi = x0 as isize;
    if fx == 0.0 {
        return img.at_clamped(xi, y as isize);
    }
    let a = img.at_clamped(xi, y as isize);
    let b = img.at_clamped(xi + 1, y as isize);
    a * (1.0 - fx) + b * fx
}

/// Generate one full sample for index `index` of a dataset run.
pub fn gen_sample(config: &SceneConfig, index: u64) -> SamplePair {
    let mut cfg = config.clone();
    cfg.seed = derive_seed(config.seed, 0x5a5a_0000 + index);
    let gt = gen_disparity(&cfg);
    render_pair(&gt, &cfg)
}

/// One dataset record: file names are relative to the manifest directory.
#[derive(Debug, Clone)]
pub struct ManifestEntry {
    pub id: String,
    pub left: String,
    pub right: String,
    pub gt: String,
    pub occlusion: String,
    pub d_max: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct Manifest {
    pub dir: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn path_of(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }
}

pub const MANIFEST_NAME: &str = "manifest.txt";

/// Render `n_pairs` samples and write the dataset tree.
pub fn gen_dataset(
    config: &SceneConfig,
    n_pairs: usize,
    out_dir: impl AsRef<Path>,
) -> Result<Manifest, DatagenError> {
    config.validate()?;
    let dir = out_dir.as_ref();
    fs::create_dir_all(dir)?;

    let results: Vec<Result<ManifestEntry, DatagenError>> = (0..n_pairs as u64)
        .into_par_iter()
        .map(|i| {
            let pair = gen_sample(config, i);
            let id = format!("{i:04}");
            let entry = ManifestEntry {
                id: id.clone(),
                left: format!("left_{id}.png"),
                right: format!("right_{id}.png"),
                gt: format!("gt_{id}.pfm"),
                occlusion: format!("occ_{id}.png"),
                d_max: config.d_max,
                seed: derive_seed(config.seed, 0x5a5a_0000 + i),
            };
            let clamp_img = |img: &GrayImage| {
                GrayImage::from_vec(
                    img.width(),
                    img.height(),
                    img.data().iter().map(|v| v.clamp(0.0, 1.0)).collect(),
                )
            };
            write_png_gray(&clamp_img(&pair.left), dir.join(&entry.left), 16)?;
            write_png_gray(&clamp_img(&pair.right), dir.join(&entry.right), 16)?;
            write_pfm(&pair.gt, dir.join(&entry.gt))?;
            let occ_img = GrayImage::from_vec(
                config.width,
                config.height,
                pair.occlusion.iter().map(|&o| if o { 1.0 } else { 0.0 }).collect(),
            );
            write_png_gray(&occ_img, dir.join(&entry.occlusion), 8)?;
            Ok(entry)
        })
        .collect();

    let mut entries = Vec::with_capacity(n_pairs);
    for r in results {
        entries.push(r?);
    }

    let mut text = String::new();
    for e in &entries {
        writeln!(
            text,
            "{} {} {} {} {} {} {}",
            e.id, e.left, e.right, e.gt, e.occlusion, e.d_max, e.seed
        )
        .expect("string write");
    }
    fs::write(dir.join(MANIFEST_NAME), text)?;
    Ok(Manifest { dir: dir.to_path_buf(), entries })
}

/// Parse a manifest file written by [`gen_dataset`].
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest, DatagenError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let dir = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
    let mut entries = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 7 {
            return Err(DatagenError::ManifestParse {
                line: ln + 1,
                msg: format!("expected 7 fields, got {}", fields.len()),
            });
        }
        let parse_err = |msg: &str| DatagenError::ManifestParse { line: ln + 1, msg: msg.into() };
        entries.push(ManifestEntry {
            id: fields[0].to_string(),
            left: fields[1].to_string(),
            right: fields[2].to_string(),
            gt: fields[3].to_string(),
            occlusion: fields[4].to_string(),
            d_max: fields[5].parse().map_err(|_| parse_err("bad d_max"))?,
            seed: fields[6].parse().map_err(|_| parse_err("bad seed"))?,
        });
    }
    Ok(Manifest { dir, entries })
}
