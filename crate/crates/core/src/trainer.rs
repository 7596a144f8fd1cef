//! Deterministic training loop: matcher-output caching, patch sampling,
//! adaptive-moment gradient descent, epoch schedule hookup, checkpointing
//! and the per-epoch CSV log.
//!
//! All randomness derives from one seed through tagged streams; the patch
//! and forward streams do not depend on the model, so the ablation arm and
//! the full arm consume identical patch sequences under the same seed.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

use crate::autodiff::{Gradients, ParamId, Tape};
use crate::bayes::{self, BatchItem, BayesError, LossBreakdown, StochasticConfig};
use crate::checkpoint::{save_checkpoint, Checkpoint, CheckpointError};
use crate::datagen::{DatagenError, Manifest};
use crate::imageio::{read_pfm, read_png_gray, write_pfm, ImageIoError};
use crate::matcher::{
    match_hierarchical, read_cost_volume, truncate_volume, write_cost_volume, MatchConfig,
    MatcherError,
};
use crate::refiner::{self, ArchDescriptor, Mode, RefinerInput, RefinerParams};
use crate::rng::{derive_seed, stream_rng};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("dataset quality: no patch with enough valid pixels after {0} retries")]
    DatasetQuality(usize),
    #[error("non-finite loss at epoch {epoch} step {step} (term: {term})")]
    NonFinite { epoch: u32, step: usize, term: &'static str },
    #[error(transparent)]
    Bayes(#[from] BayesError),
    #[error(transparent)]
    Refiner(#[from] refiner::RefinerError),
    #[error(transparent)]
    Matcher(#[from] MatcherError),
    #[error(transparent)]
    Image(#[from] ImageIoError),
    #[error(transparent)]
    Dataset(#[from] DatagenError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Op(#[from] crate::ops::OpError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: u32,
    /// Patches per optimizer step.
    pub batch_size: usize,
    /// Square patch edge, in pixels.
    pub patch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Detach the outlier branch (the baseline arm).
    pub ablation: bool,
    /// Steps per epoch; None derives ~3 passes over the images per epoch.
    pub steps_per_epoch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 8,
            patch_size: 64,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            ablation: false,
            steps_per_epoch: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, desc: &ArchDescriptor) -> Result<(), TrainError> {
        if self.epochs < 1 {
            return Err(TrainError::Config("epochs must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(TrainError::Config("batch size must be >= 1".into()));
        }
        let max_factor = desc.context_levels.iter().map(|&(f, _)| f).max().unwrap_or(1);
        if self.patch_size < 4 * max_factor {
            return Err(TrainError::Config(format!(
                "patch size {} must be at least 4x the largest pooling factor {max_factor}",
                self.patch_size
            )));
        }
        if self.learning_rate <= 0.0 {
            return Err(TrainError::Config("learning rate must be positive".into()));
        }
        Ok(())
    }

    fn steps(&self, n_samples: usize) -> usize {
        self.steps_per_epoch
            .unwrap_or_else(|| (3 * n_samples).div_ceil(self.batch_size).max(1))
    }
}

/// One dataset sample with matcher outputs, resident in f32.
pub struct PreparedSample {
    pub width: usize,
    pub height: usize,
    pub k: usize,
    pub raw: Vec<f32>,
    pub raw_valid: Vec<bool>,
    /// (2K+1) similarity planes then (2K+1) chi planes.
    pub slices: Vec<f32>,
    pub chi: Vec<f32>,
    pub gt: Vec<f32>,
    /// gt-valid AND raw-valid: pixels usable in the loss and metrics.
    pub valid: Vec<bool>,
}

impl PreparedSample {
    /// Extract a patch as network inputs plus the loss constants.
    pub fn patch(&self, y0: usize, x0: usize, p: usize) -> (RefinerInput, Tensor, Vec<bool>) {
        let n_slices = 2 * self.k + 1;
        let plane = self.width * self.height;
        let raw = Tensor::from_fn(1, p, p, |_, y, x| {
            self.raw[(y0 + y) * self.width + (x0 + x)] as f64
        });
        let grab = |src: &[f32]| {
            Tensor::from_fn(n_slices, p, p, |c, y, x| {
                src[c * plane + (y0 + y) * self.width + (x0 + x)] as f64
            })
        };
        let input = RefinerInput::from_tensors(raw, grab(&self.slices), grab(&self.chi));
        let mut valid = Vec::with_capacity(p * p);
        let mut residual = Tensor::zeros(1, p, p);
        for y in 0..p {
            for x in 0..p {
                let i = (y0 + y) * self.width + (x0 + x);
                valid.push(self.valid[i]);
                if self.valid[i] {
                    residual.set(0, y, x, (self.gt[i] - self.raw[i]) as f64);
                }
            }
        }
        (input, residual, valid)
    }

    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

fn cache_paths(manifest: &Manifest, id: &str) -> (PathBuf, PathBuf) {
    (
        manifest.path_of(&format!("raw_{id}.pfm")),
        manifest.path_of(&format!("cv_{id}.sdcv")),
    )
}

/// Load a dataset and ensure matcher outputs exist on disk next to it
/// (`raw_<id>.pfm`, `cv_<id>.sdcv`); they are computed once and reused.
pub fn prepare_dataset(
    manifest: &Manifest,
    match_cfg: &MatchConfig,
    k: usize,
) -> Result<Vec<PreparedSample>, TrainError> {
    let results: Vec<Result<PreparedSample, TrainError>> = manifest
        .entries
        .par_iter()
        .map(|entry| {
            let (raw_path, cv_path) = cache_paths(manifest, &entry.id);
            let gt = read_pfm(manifest.path_of(&entry.gt))?;

            let cached = if raw_path.exists() && cv_path.exists() {
                let raw = read_pfm(&raw_path)?;
                let cv = read_cost_volume(&cv_path)?;
                if cv.k == k && cv.slices.height() == gt.height() && cv.slices.width() == gt.width()
                {
                    Some((raw, cv))
                } else {
                    None
                }
            } else {
                None
            };
            let (raw, cv) = match cached {
                Some(pair) => pair,
                None => {
                    let left = read_png_gray(manifest.path_of(&entry.left))?;
                    let right = read_png_gray(manifest.path_of(&entry.right))?;
                    let mut cfg = match_cfg.clone();
                    cfg.d_max = entry.d_max.ceil() as usize;
                    let raw = match_hierarchical(&left, &right, &cfg)?;
                    let cv = truncate_volume(&left, &right, &raw, k, cfg.radius, cfg.d_max, cfg.eps);
                    write_pfm(&raw, &raw_path)?;
                    write_cost_volume(&cv, &cv_path)?;
                    (raw, cv)
                }
            };

            let (w, h) = (gt.width(), gt.height());
            let plane = w * h;
            let n_slices = 2 * k + 1;
            let mut slices = vec![0.0f32; n_slices * plane];
            let mut chi = vec![0.0f32; n_slices * plane];
            for (dst, src) in slices.iter_mut().zip(cv.slices.data()) {
                *dst = *src as f32;
            }
            for (dst, src) in chi.iter_mut().zip(cv.chi.data()) {
                *dst = *src as f32;
            }
            let valid: Vec<bool> = (0..plane)
                .map(|i| gt.valid()[i] && raw.valid()[i])
                .collect();
            Ok(PreparedSample {
                width: w,
                height: h,
                k,
                raw: raw.disparity().to_vec(),
                raw_valid: raw.valid().to_vec(),
                slices,
                chi,
                gt: gt.disparity().to_vec(),
                valid,
            })
        })
        .collect();
    results.into_iter().collect()
}

/// A sampled patch location.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchRef {
    pub sample: usize,
    pub y0: usize,
    pub x0: usize,
}

const MIN_VALID_FRACTION: f64 = 0.05;
const MAX_PATCH_RETRIES: usize = 100;

/// Draw `count` patches uniformly over (image, top-left corner), rejecting
/// patches with fewer than 5% valid pixels.
pub fn sample_patches(
    samples: &[PreparedSample],
    patch_size: usize,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<PatchRef>, TrainError> {
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut found = None;
        for _ in 0..MAX_PATCH_RETRIES {
            let si = rng.random_range(0..samples.len());
            let s = &samples[si];
            if s.width < patch_size || s.height < patch_size {
                continue;
            }
            let y0 = rng.random_range(0..=s.height - patch_size);
            let x0 = rng.random_range(0..=s.width - patch_size);
            let mut n_valid = 0usize;
            for y in y0..y0 + patch_size {
                for x in x0..x0 + patch_size {
                    if s.valid[y * s.width + x] {
                        n_valid += 1;
                    }
                }
            }
            if (n_valid as f64) >= MIN_VALID_FRACTION * (patch_size * patch_size) as f64 {
                found = Some(PatchRef { sample: si, y0, x0 });
                break;
            }
        }
        out.push(found.ok_or(TrainError::DatasetQuality(MAX_PATCH_RETRIES))?);
    }
    Ok(out)
}

/// Adaptive-moment optimizer state, aligned with the canonical tensor order.
struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    fn new(params: &RefinerParams, cfg: &TrainConfig) -> Self {
        let shapes: Vec<Tensor> = params
            .tensors()
            .iter()
            .map(|(_, t)| {
                let s = t.shape();
                Tensor::zeros(s.channels, s.height, s.width)
            })
            .collect();
        Adam {
            m: shapes.clone(),
            v: shapes,
            t: 0,
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
        }
    }

    fn step(&mut self, params: &mut RefinerParams, grads: &Gradients) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (_, tensor)) in params.tensors_mut().into_iter().enumerate() {
            let Some(g) = grads.get(ParamId(i)) else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..tensor.len() {
                let gj = g.data()[j];
                m.data_mut()[j] = self.beta1 * m.data()[j] + (1.0 - self.beta1) * gj;
                v.data_mut()[j] = self.beta2 * v.data()[j] + (1.0 - self.beta2) * gj * gj;
                let mh = m.data()[j] / bc1;
                let vh = v.data()[j] / bc2;
                tensor.data_mut()[j] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// One row of the training log.
#[derive(Debug, Clone)]
pub struct EpochLog {
    pub epoch: u32,
    pub nll: f64,
    pub kl: f64,
    pub l2: f64,
    pub reward: f64,
    pub total: f64,
    pub mean_p_out: Option<f64>,
}

pub fn write_log_csv(log: &[EpochLog], path: impl AsRef<Path>) -> Result<(), std::io::Error> {
    let mut text = String::from("epoch,nll,kl,l2,reward,total,mean_p_out\n");
    for row in log {
        let p = row.mean_p_out.map(|v| v.to_string()).unwrap_or_default();
        writeln!(
            text,
            "{},{},{},{},{},{},{}",
            row.epoch, row.nll, row.kl, row.l2, row.reward, row.total, p
        )
        .expect("string write");
    }
    fs::write(path, text)
}

/// Output locations of one training run.
#[derive(Debug, Clone)]
pub struct TrainSink {
    pub final_ckpt: PathBuf,
    pub best_ckpt: PathBuf,
    pub log_csv: PathBuf,
}

impl TrainSink {
    /// Derive paths from the final checkpoint path: `model.ckpt` gets a
    /// sibling `model.best.ckpt` and `model.log.csv`.
    pub fn from_final(path: impl AsRef<Path>) -> Self {
        let path = path.as_ref().to_path_buf();
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
        let ext = path.extension().and_then(|s| s.to_str()).unwrap_or("ckpt");
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        TrainSink {
            best_ckpt: dir.join(format!("{stem}.best.{ext}")),
            log_csv: dir.join(format!("{stem}.log.csv")),
            final_ckpt: path,
        }
    }
}

const STREAM_PATCH: u64 = 0xA001;
const STREAM_FORWARD: u64 = 0xA002;

/// Patch-sampling stream for a given (seed, epoch, step); a pure function of
/// its arguments, shared verbatim by the full and ablation arms.
pub fn patch_stream_rng(seed: u64, epoch: u32, step: usize) -> ChaCha8Rng {
    let tag = (epoch as u64) << 20 | step as u64;
    stream_rng(derive_seed(seed, STREAM_PATCH), tag)
}

fn forward_stream_rng(seed: u64, epoch: u32, step: usize) -> ChaCha8Rng {
    let tag = (epoch as u64) << 20 | step as u64;
    stream_rng(derive_seed(seed, STREAM_FORWARD), tag)
}

fn check_finite(b: &LossBreakdown, epoch: u32, step: usize) -> Result<(), TrainError> {
    let checks: [(&'static str, f64); 5] = [
        ("nll", b.nll),
        ("kl", b.kl),
        ("l2", b.l2_prior),
        ("reward", b.reward),
        ("total", b.total),
    ];
    for (term, v) in checks {
        if !v.is_finite() {
            return Err(TrainError::NonFinite { epoch, step, term });
        }
    }
    Ok(())
}

/// Train a refiner on prepared samples. Returns the final checkpoint and the
/// per-epoch log; writes final and best-loss checkpoints plus the CSV log.
pub fn train(
    samples: &[PreparedSample],
    desc: &ArchDescriptor,
    cfg: &TrainConfig,
    stochastic: &StochasticConfig,
    sink: &TrainSink,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(Checkpoint, Vec<EpochLog>), TrainError> {
    cfg.validate(desc)?;
    stochastic.validate()?;
    if samples.is_empty() {
        return Err(TrainError::Config("empty dataset".into()));
    }

    let mut params = RefinerParams::init(desc, derive_seed(cfg.seed, 0x1111))?;
    let mut adam = Adam::new(&params, cfg);
    let steps = cfg.steps(samples.len());
    let n_pixels_per_epoch = steps * cfg.batch_size * cfg.patch_size * cfg.patch_size;

    let mut log: Vec<EpochLog> = Vec::with_capacity(cfg.epochs as usize);
    let mut best: Option<(f64, RefinerParams)> = None;

    for epoch in 1..=cfg.epochs {
        let mut sums = [0.0f64; 5];
        let mut p_sum = 0.0f64;
        let mut p_count = 0usize;
        for step in 0..steps {
            let mut patch_rng = patch_stream_rng(cfg.seed, epoch, step);
            let mut fwd_rng = forward_stream_rng(cfg.seed, epoch, step);

            let refs = sample_patches(samples, cfg.patch_size, cfg.batch_size, &mut patch_rng)?;
            let mut tape = Tape::new();
            let (handles, priors) = refiner::register_all(&mut tape, &params, cfg.ablation);
            let mut items: Vec<BatchItem<_>> = Vec::with_capacity(refs.len());
            for r in &refs {
                let (input, residual, valid) =
                    samples[r.sample].patch(r.y0, r.x0, cfg.patch_size);
                let (delta, p_out, _, _) = refiner::forward_with(
                    &mut tape,
                    &params,
                    &handles,
                    &input,
                    &mut Mode::Stochastic(&mut fwd_rng),
                )?;
                items.push(BatchItem { delta, p_out, residual_base: residual, valid });
            }
            let (loss, breakdown) = match bayes::total_loss(
                &mut tape,
                &items,
                &priors,
                stochastic,
                epoch,
                n_pixels_per_epoch,
            ) {
                Ok(r) => r,
                Err(BayesError::NoValidPixels) => continue,
                Err(e) => return Err(e.into()),
            };
            check_finite(&breakdown, epoch, step)?;
            let grads = tape.backward(loss)?;
            adam.step(&mut params, &grads);

            sums[0] += breakdown.nll;
            sums[1] += breakdown.kl;
            sums[2] += breakdown.l2_prior;
            sums[3] += breakdown.reward;
            sums[4] += breakdown.total;
            if let Some(p) = breakdown.mean_p_out {
                p_sum += p;
                p_count += 1;
            }
        }
        let inv = 1.0 / steps as f64;
        let row = EpochLog {
            epoch,
            nll: sums[0] * inv,
            kl: sums[1] * inv,
            l2: sums[2] * inv,
            reward: sums[3] * inv,
            total: sums[4] * inv,
            mean_p_out: (p_count > 0).then_some(p_sum / p_count as f64),
        };
        let is_best = best.as_ref().map(|(b, _)| row.total < *b).unwrap_or(true);
        if is_best {
            best = Some((row.total, params.clone()));
        }
        on_epoch(&row);
        log.push(row);
    }

    let final_ckpt = Checkpoint {
        params,
        stochastic: stochastic.clone(),
        ablation: cfg.ablation,
    };
    save_checkpoint(&final_ckpt, &sink.final_ckpt)?;
    let best_ckpt = Checkpoint {
        params: best.expect("at least one epoch").1,
        stochastic: stochastic.clone(),
        ablation: cfg.ablation,
    };
    save_checkpoint(&best_ckpt, &sink.best_ckpt)?;
    write_log_csv(&log, &sink.log_csv)?;
    Ok((final_ckpt, log))
}
