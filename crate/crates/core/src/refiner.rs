//! The refinement network: a fast context-aggregation stage feeding a
//! disparity-regression branch and an outlier-detection branch, built over
//! [`crate::autodiff::Ctx`] so the same definition runs eagerly for
//! inference and on a tape for training.
//!
//! Point-estimate convolutions carry plain weights; variational
//! convolutions carry (mu, rho) pairs sampled by reparameterization in
//! stochastic mode and collapsed to mu in mean mode. Monte-Carlo dropout
//! sits after the context block and the two regression trunk layers.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::autodiff::{Ctx, ParamId};
use crate::bayes::PriorHandles;
use crate::imageio::DisparityMap;
use crate::matcher::TruncatedCostVolume;
use crate::ops::{self, ConvSpec, OpError, Padding, PoolKind};
use crate::rng::stream_rng;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum RefinerError {
    #[error("invalid refiner config: {0}")]
    Config(String),
    #[error(transparent)]
    Op(#[from] OpError),
}

/// Channel widths and constants defining one network instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchDescriptor {
    /// Cost-volume half-width; the input carries 2(2K+1)+1 channels.
    pub k: usize,
    /// (pooling factor, output channels) per context pyramid level.
    pub context_levels: Vec<(usize, usize)>,
    /// Channels of the full-resolution bypass convolution.
    pub context_fullres_channels: usize,
    /// Kernel size of the per-level context convolutions.
    pub context_kernel: usize,
    /// Widths of the shared regression trunk (leaky-ReLU 0.3 + dropout).
    pub reg_trunk: Vec<usize>,
    /// Widths of the regression head (leaky-hardswish); the last entry is
    /// the variational penultimate layer.
    pub reg_head: Vec<usize>,
    /// Channels entering the separable outlier filter.
    pub outlier_hidden: usize,
    pub dropout_p: f64,
    /// Leak constant of the hardswish variant.
    pub lambda_act: f64,
    /// Raw disparities are fed to the network divided by this.
    pub d_norm: f64,
}

impl Default for ArchDescriptor {
    fn default() -> Self {
        ArchDescriptor {
            k: 3,
            context_levels: vec![(2, 16), (4, 16), (8, 16)],
            context_fullres_channels: 16,
            context_kernel: 3,
            reg_trunk: vec![32, 32],
            reg_head: vec![24, 16],
            outlier_hidden: 25,
            dropout_p: 0.05,
            lambda_act: 0.01,
            d_norm: 72.0,
        }
    }
}

impl ArchDescriptor {
    pub fn in_channels(&self) -> usize {
        2 * (2 * self.k + 1) + 1
    }

    pub fn context_out_channels(&self) -> usize {
        self.context_fullres_channels + self.context_levels.iter().map(|&(_, c)| c).sum::<usize>()
    }

    pub fn validate(&self) -> Result<(), RefinerError> {
        if self.context_levels.is_empty() {
            return Err(RefinerError::Config("need at least one context level".into()));
        }
        if self.context_levels.iter().any(|&(f, c)| f == 0 || c == 0) {
            return Err(RefinerError::Config("context level factors and widths must be positive".into()));
        }
        if self.context_kernel % 2 == 0 {
            return Err(RefinerError::Config("context kernel must be odd".into()));
        }
        if self.reg_trunk.is_empty() || self.reg_head.is_empty() {
            return Err(RefinerError::Config("regression trunk and head must be non-empty".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(RefinerError::Config(format!("dropout {} outside [0,1)", self.dropout_p)));
        }
        if self.lambda_act <= 0.0 {
            return Err(RefinerError::Config("lambda_act must be positive".into()));
        }
        if self.d_norm <= 0.0 {
            return Err(RefinerError::Config("d_norm must be positive".into()));
        }
        Ok(())
    }
}

/// Point-estimate convolution parameters.
#[derive(Debug, Clone)]
pub struct PointConv {
    pub w: Tensor,
    pub b: Tensor,
    pub spec: ConvSpec,
}

/// Variational convolution parameters: Gaussian weights with mean mu and
/// std softplus(rho), for both the kernel and the bias.
#[derive(Debug, Clone)]
pub struct VarConv {
    pub mu_w: Tensor,
    pub rho_w: Tensor,
    pub mu_b: Tensor,
    pub rho_b: Tensor,
    pub spec: ConvSpec,
}

const RHO_INIT_STD: f64 = 0.05;

fn he_conv(rng: &mut ChaCha8Rng, spec: ConvSpec, gain: f64) -> PointConv {
    let fan_in = (spec.in_ch * spec.kh * spec.kw) as f64;
    let std = gain * (2.0 / fan_in).sqrt();
    let (c, h, w) = spec.weight_shape();
    let w_t = Tensor::from_fn(c, h, w, |_, _, _| {
        let e: f64 = rng.sample(StandardNormal);
        std * e
    });
    PointConv { w: w_t, b: Tensor::zeros(spec.out_ch, 1, 1), spec }
}

fn he_var_conv(rng: &mut ChaCha8Rng, spec: ConvSpec, gain: f64) -> VarConv {
    let point = he_conv(rng, spec, gain);
    let rho = ops::softplus_inv(RHO_INIT_STD);
    let (c, h, w) = spec.weight_shape();
    VarConv {
        mu_w: point.w,
        rho_w: Tensor::filled(c, h, w, rho),
        mu_b: point.b,
        rho_b: Tensor::filled(spec.out_ch, 1, 1, rho),
        spec,
    }
}

/// Every trainable tensor of the network.
#[derive(Debug, Clone)]
pub struct RefinerParams {
    pub desc: ArchDescriptor,
    pub ctx_levels: Vec<PointConv>,
    pub ctx_full: PointConv,
    pub reg_trunk: Vec<PointConv>,
    pub reg_head_point: Vec<PointConv>,
    pub reg_penult: VarConv,
    pub reg_final: VarConv,
    pub out_hidden: PointConv,
    pub out_sep_point: VarConv,
    pub out_sep_row: VarConv,
    pub out_sep_col: VarConv,
}

impl RefinerParams {
    pub fn init(desc: &ArchDescriptor, seed: u64) -> Result<Self, RefinerError> {
        desc.validate()?;
        let mut rng = stream_rng(seed, 0x1217);
        let in_ch = desc.in_channels();
        let pooled_in = 3 * in_ch;
        let kk = desc.context_kernel;

        let ctx_levels: Vec<PointConv> = desc
            .context_levels
            .iter()
            .map(|&(_, ch)| he_conv(&mut rng, ConvSpec::new(ch, pooled_in, kk, kk, Padding::Same), 1.0))
            .collect();
        let ctx_full = he_conv(
            &mut rng,
            ConvSpec::new(desc.context_fullres_channels, in_ch, 1, 1, Padding::Same),
            1.0,
        );

        let mut trunk = Vec::new();
        let mut prev = desc.context_out_channels();
        for &wdt in &desc.reg_trunk {
            trunk.push(he_conv(&mut rng, ConvSpec::new(wdt, prev, 1, 1, Padding::Same), 1.0));
            prev = wdt;
        }
        let shared_ch = prev;

        let mut head_point = Vec::new();
        for &wdt in &desc.reg_head[..desc.reg_head.len() - 1] {
            head_point.push(he_conv(&mut rng, ConvSpec::new(wdt, prev, 1, 1, Padding::Same), 1.0));
            prev = wdt;
        }
        let penult_ch = *desc.reg_head.last().unwrap();
        let reg_penult =
            he_var_conv(&mut rng, ConvSpec::new(penult_ch, prev, 1, 1, Padding::Same), 1.0);
        let reg_final =
            he_var_conv(&mut rng, ConvSpec::new(1, penult_ch, 1, 1, Padding::Same), 0.3);

        let out_hidden = he_conv(
            &mut rng,
            ConvSpec::new(desc.outlier_hidden, shared_ch, 1, 1, Padding::Same),
            1.0,
        );
        let out_sep_point = he_var_conv(
            &mut rng,
            ConvSpec::new(1, desc.outlier_hidden, 1, 1, Padding::Same),
            1.0,
        );
        let out_sep_row = he_var_conv(&mut rng, ConvSpec::new(1, 1, 1, 5, Padding::Same), 1.0);
        let out_sep_col = he_var_conv(&mut rng, ConvSpec::new(1, 1, 5, 1, Padding::Same), 1.0);

        Ok(RefinerParams {
            desc: desc.clone(),
            ctx_levels,
            ctx_full,
            reg_trunk: trunk,
            reg_head_point: head_point,
            reg_penult,
            reg_final,
            out_hidden,
            out_sep_point,
            out_sep_row,
            out_sep_col,
        })
    }

    /// Named tensors in the canonical (checkpoint and optimizer) order.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        for (i, c) in self.ctx_levels.iter().enumerate() {
            out.push((format!("ctx.level{i}.w"), &c.w));
            out.push((format!("ctx.level{i}.b"), &c.b));
        }
        out.push(("ctx.full.w".into(), &self.ctx_full.w));
        out.push(("ctx.full.b".into(), &self.ctx_full.b));
        for (i, c) in self.reg_trunk.iter().enumerate() {
            out.push((format!("reg.trunk{i}.w"), &c.w));
            out.push((format!("reg.trunk{i}.b"), &c.b));
        }
        for (i, c) in self.reg_head_point.iter().enumerate() {
            out.push((format!("reg.head{i}.w"), &c.w));
            out.push((format!("reg.head{i}.b"), &c.b));
        }
        for (name, c) in [("reg.penult", &self.reg_penult), ("reg.final", &self.reg_final)] {
            out.push((format!("{name}.mu_w"), &c.mu_w));
            out.push((format!("{name}.rho_w"), &c.rho_w));
            out.push((format!("{name}.mu_b"), &c.mu_b));
            out.push((format!("{name}.rho_b"), &c.rho_b));
        }
        out.push(("out.hidden.w".into(), &self.out_hidden.w));
        out.push(("out.hidden.b".into(), &self.out_hidden.b));
        for (name, c) in [
            ("out.sep_point", &self.out_sep_point),
            ("out.sep_row", &self.out_sep_row),
            ("out.sep_col", &self.out_sep_col),
        ] {
            out.push((format!("{name}.mu_w"), &c.mu_w));
            out.push((format!("{name}.rho_w"), &c.rho_w));
            out.push((format!("{name}.mu_b"), &c.mu_b));
            out.push((format!("{name}.rho_b"), &c.rho_b));
        }
        out
    }

    /// Mutable access in the same canonical order.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        for (i, c) in self.ctx_levels.iter_mut().enumerate() {
            out.push((format!("ctx.level{i}.w"), &mut c.w));
            out.push((format!("ctx.level{i}.b"), &mut c.b));
        }
        out.push(("ctx.full.w".into(), &mut self.ctx_full.w));
        out.push(("ctx.full.b".into(), &mut self.ctx_full.b));
        for (i, c) in self.reg_trunk.iter_mut().enumerate() {
            out.push((format!("reg.trunk{i}.w"), &mut c.w));
            out.push((format!("reg.trunk{i}.b"), &mut c.b));
        }
        for (i, c) in self.reg_head_point.iter_mut().enumerate() {
            out.push((format!("reg.head{i}.w"), &mut c.w));
            out.push((format!("reg.head{i}.b"), &mut c.b));
        }
        for (name, c) in [
            ("reg.penult", &mut self.reg_penult),
            ("reg.final", &mut self.reg_final),
        ] {
            out.push((format!("{name}.mu_w"), &mut c.mu_w));
            out.push((format!("{name}.rho_w"), &mut c.rho_w));
            out.push((format!("{name}.mu_b"), &mut c.mu_b));
            out.push((format!("{name}.rho_b"), &mut c.rho_b));
        }
        out.push(("out.hidden.w".into(), &mut self.out_hidden.w));
        out.push(("out.hidden.b".into(), &mut self.out_hidden.b));
        for (name, c) in [
            ("out.sep_point", &mut self.out_sep_point),
            ("out.sep_row", &mut self.out_sep_row),
            ("out.sep_col", &mut self.out_sep_col),
        ] {
            out.push((format!("{name}.mu_w"), &mut c.mu_w));
            out.push((format!("{name}.rho_w"), &mut c.rho_w));
            out.push((format!("{name}.mu_b"), &mut c.mu_b));
            out.push((format!("{name}.rho_b"), &mut c.rho_b));
        }
        out
    }

    /// Total trainable scalar count (variational layers count mu and rho).
    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Weight count of the separable outlier filter, excluding biases and
    /// counting each Gaussian weight once: 25 + 5 + 5.
    pub fn separable_weight_count(&self) -> usize {
        self.out_sep_point.mu_w.len() + self.out_sep_row.mu_w.len() + self.out_sep_col.mu_w.len()
    }

    /// Indices of the outlier-branch tensors in the canonical order.
    pub fn outlier_branch_ids(&self) -> Vec<usize> {
        let names = self.tensors();
        names
            .iter()
            .enumerate()
            .filter(|(_, (n, _))| n.starts_with("out."))
            .map(|(i, _)| i)
            .collect()
    }
}

/// Network inputs for one frame or patch: raw disparity in pixels (0 where
/// invalid), similarity slices and their support indicator.
#[derive(Debug, Clone)]
pub struct RefinerInput {
    pub raw: Tensor,
    pub slices: Tensor,
    pub chi: Tensor,
}

impl RefinerInput {
    pub fn new(raw: &DisparityMap, cv: &TruncatedCostVolume) -> Self {
        let (w, h) = (raw.width(), raw.height());
        let raw_t = Tensor::from_fn(1, h, w, |_, y, x| raw.get(x, y) as f64);
        RefinerInput { raw: raw_t, slices: cv.slices.clone(), chi: cv.chi.clone() }
    }

    pub fn from_tensors(raw: Tensor, slices: Tensor, chi: Tensor) -> Self {
        RefinerInput { raw, slices, chi }
    }

    /// Stacked network input: (d/d_norm, V^t, chi), 2(2K+1)+1 channels.
    pub fn stacked(&self, d_norm: f64) -> Result<Tensor, OpError> {
        let norm = self.raw.map(|v| v / d_norm);
        ops::concat_channels(&[&norm, &self.slices, &self.chi])
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Self {
        RefinerInput {
            raw: self.raw.crop(y0, x0, h, w),
            slices: self.slices.crop(y0, x0, h, w),
            chi: self.chi.crop(y0, x0, h, w),
        }
    }
}

/// Forward evaluation mode.
pub enum Mode<'a> {
    /// Deterministic single pass: dropout flattened to the identity and
    /// variational layers evaluated at their mean weights.
    Mean,
    /// Dropout and weight sampling active, driven by the given generator.
    Stochastic(&'a mut ChaCha8Rng),
}

/// Network outputs on an execution context.
pub struct GraphOutputs<V> {
    pub delta: V,
    /// None when the outlier branch is detached (ablation).
    pub p_out: Option<V>,
    pub shared: V,
    pub context: V,
    /// Parameter handles for the prior terms of the loss.
    pub priors: PriorHandles<V>,
}

struct Registrar<C: Ctx> {
    next: usize,
    priors: PriorHandles<C::Val>,
}

impl<C: Ctx> Registrar<C> {
    fn new() -> Self {
        Registrar { next: 0, priors: PriorHandles { variational: Vec::new(), point: Vec::new() } }
    }

    fn point(&mut self, ctx: &mut C, c: &PointConv) -> (C::Val, C::Val) {
        let w = ctx.param(ParamId(self.next), &c.w);
        let b = ctx.param(ParamId(self.next + 1), &c.b);
        self.next += 2;
        self.priors.point.push(w.clone());
        self.priors.point.push(b.clone());
        (w, b)
    }

    fn var(&mut self, ctx: &mut C, c: &VarConv) -> (C::Val, C::Val, C::Val, C::Val) {
        let mu_w = ctx.param(ParamId(self.next), &c.mu_w);
        let rho_w = ctx.param(ParamId(self.next + 1), &c.rho_w);
        let mu_b = ctx.param(ParamId(self.next + 2), &c.mu_b);
        let rho_b = ctx.param(ParamId(self.next + 3), &c.rho_b);
        self.next += 4;
        self.priors.variational.push((mu_w.clone(), rho_w.clone()));
        self.priors.variational.push((mu_b.clone(), rho_b.clone()));
        (mu_w, rho_w, mu_b, rho_b)
    }

    /// Register parameters of a detached branch: ids stay stable but the
    /// tensors take part in neither the graph nor the prior terms, so they
    /// receive no gradient at all.
    fn skip_point(&mut self, ctx: &mut C, c: &PointConv) {
        ctx.param(ParamId(self.next), &c.w);
        ctx.param(ParamId(self.next + 1), &c.b);
        self.next += 2;
    }

    fn skip_var(&mut self, ctx: &mut C, c: &VarConv) {
        ctx.param(ParamId(self.next), &c.mu_w);
        ctx.param(ParamId(self.next + 1), &c.rho_w);
        ctx.param(ParamId(self.next + 2), &c.mu_b);
        ctx.param(ParamId(self.next + 3), &c.rho_b);
        self.next += 4;
    }
}

fn gauss_tensor(rng: &mut ChaCha8Rng, like: &Tensor) -> Tensor {
    let s = like.shape();
    Tensor::from_fn(s.channels, s.height, s.width, |_, _, _| rng.sample(StandardNormal))
}

/// Variational conv handles: (mu_w, rho_w, mu_b, rho_b).
type VarHandles<V> = (V, V, V, V);

/// Registered parameter handles; one registration can drive many forward
/// passes on the same context (the training batch shares parameters).
pub struct NetHandles<V> {
    ctx_levels: Vec<(V, V)>,
    ctx_full: (V, V),
    reg_trunk: Vec<(V, V)>,
    reg_head_point: Vec<(V, V)>,
    reg_penult: VarHandles<V>,
    reg_final: VarHandles<V>,
    /// None when the outlier branch is detached.
    outlier: Option<(
        (V, V),
        VarHandles<V>,
        VarHandles<V>,
        VarHandles<V>,
    )>,
}

/// Register every parameter tensor in canonical order (matching
/// [`RefinerParams::tensors`]) and collect the prior handles. With
/// `detach_outliers` the outlier-branch tensors keep their ids but take part
/// in neither the graph nor the priors.
pub fn register_all<C: Ctx>(
    ctx: &mut C,
    params: &RefinerParams,
    detach_outliers: bool,
) -> (NetHandles<C::Val>, PriorHandles<C::Val>) {
    let mut reg = Registrar::<C>::new();
    let ctx_levels = params.ctx_levels.iter().map(|c| reg.point(ctx, c)).collect();
    let ctx_full = reg.point(ctx, &params.ctx_full);
    let reg_trunk = params.reg_trunk.iter().map(|c| reg.point(ctx, c)).collect();
    let reg_head_point = params.reg_head_point.iter().map(|c| reg.point(ctx, c)).collect();
    let reg_penult = reg.var(ctx, &params.reg_penult);
    let reg_final = reg.var(ctx, &params.reg_final);
    let outlier = if detach_outliers {
        reg.skip_point(ctx, &params.out_hidden);
        reg.skip_var(ctx, &params.out_sep_point);
        reg.skip_var(ctx, &params.out_sep_row);
        reg.skip_var(ctx, &params.out_sep_col);
        None
    } else {
        let hid = reg.point(ctx, &params.out_hidden);
        let p = reg.var(ctx, &params.out_sep_point);
        let r = reg.var(ctx, &params.out_sep_row);
        let c = reg.var(ctx, &params.out_sep_col);
        Some((hid, p, r, c))
    };
    (
        NetHandles {
            ctx_levels,
            ctx_full,
            reg_trunk,
            reg_head_point,
            reg_penult,
            reg_final,
            outlier,
        },
        reg.priors,
    )
}

fn var_conv<C: Ctx>(
    ctx: &mut C,
    h: &VarHandles<C::Val>,
    c: &VarConv,
    x: &C::Val,
    mode: &mut Mode<'_>,
) -> Result<C::Val, OpError> {
    let (mu_w, rho_w, mu_b, rho_b) = h;
    match mode {
        Mode::Mean => ctx.conv2d(x, mu_w, mu_b, c.spec),
        Mode::Stochastic(rng) => {
            let eps_w = gauss_tensor(rng, &c.mu_w);
            let eps_b = gauss_tensor(rng, &c.mu_b);
            let w = ctx.reparam(mu_w, rho_w, eps_w);
            let b = ctx.reparam(mu_b, rho_b, eps_b);
            ctx.conv2d(x, &w, &b, c.spec)
        }
    }
}

fn maybe_dropout<C: Ctx>(
    ctx: &mut C,
    x: C::Val,
    p: f64,
    mode: &mut Mode<'_>,
) -> Result<C::Val, OpError> {
    match mode {
        Mode::Mean => Ok(x),
        Mode::Stochastic(rng) => {
            if p == 0.0 {
                return Ok(x);
            }
            let s = ctx.value(&x).shape();
            let mask = ops::dropout_mask((s.channels, s.height, s.width), p, rng)?;
            Ok(ctx.dropout(&x, mask))
        }
    }
}

/// One forward pass over already-registered parameter handles.
pub fn forward_with<C: Ctx>(
    ctx: &mut C,
    params: &RefinerParams,
    handles: &NetHandles<C::Val>,
    input: &RefinerInput,
    mode: &mut Mode<'_>,
) -> Result<(C::Val, Option<C::Val>, C::Val, C::Val), RefinerError> {
    let desc = &params.desc;
    let stacked = input.stacked(desc.d_norm)?;
    let (h, w) = (stacked.height(), stacked.width());
    if stacked.channels() != desc.in_channels() {
        return Err(RefinerError::Config(format!(
            "input has {} channels, descriptor expects {}",
            stacked.channels(),
            desc.in_channels()
        )));
    }
    let x = ctx.constant(stacked);

    // context aggregation: per level, min/max/avg pooling, one convolution,
    // nearest-neighbor upsampling back to full resolution
    let mut ctx_parts: Vec<C::Val> = Vec::new();
    for (li, &(factor, _)) in desc.context_levels.iter().enumerate() {
        let mn = ctx.pool(&x, PoolKind::Min, factor)?;
        let mx = ctx.pool(&x, PoolKind::Max, factor)?;
        let av = ctx.pool(&x, PoolKind::Avg, factor)?;
        let pooled = ctx.concat(&[&mn, &mx, &av])?;
        let (cw, cb) = &handles.ctx_levels[li];
        let conv = ctx.conv2d(&pooled, cw, cb, params.ctx_levels[li].spec)?;
        let act = ctx.leaky_relu(&conv, 0.3);
        let up = ctx.upsample(&act, factor, h, w)?;
        ctx_parts.push(up);
    }
    let (fw, fb) = &handles.ctx_full;
    let full = ctx.conv2d(&x, fw, fb, params.ctx_full.spec)?;
    let mut all_parts: Vec<&C::Val> = vec![&full];
    all_parts.extend(ctx_parts.iter());
    let context_raw = ctx.concat(&all_parts)?;
    let context = maybe_dropout(ctx, context_raw, desc.dropout_p, mode)?;

    // regression trunk (shared with the outlier branch)
    let mut cur = context.clone();
    for (conv, (cw, cb)) in params.reg_trunk.iter().zip(&handles.reg_trunk) {
        let c = ctx.conv2d(&cur, cw, cb, conv.spec)?;
        let a = ctx.leaky_relu(&c, 0.3);
        cur = maybe_dropout(ctx, a, desc.dropout_p, mode)?;
    }
    let shared = cur.clone();

    // regression head: hardswish stages, then the final variational 1x1
    // without an activation
    for (conv, (cw, cb)) in params.reg_head_point.iter().zip(&handles.reg_head_point) {
        let c = ctx.conv2d(&cur, cw, cb, conv.spec)?;
        cur = ctx.leaky_hardswish(&c, desc.lambda_act);
    }
    let pen = var_conv(ctx, &handles.reg_penult, &params.reg_penult, &cur, mode)?;
    let pen = ctx.leaky_hardswish(&pen, desc.lambda_act);
    let delta = var_conv(ctx, &handles.reg_final, &params.reg_final, &pen, mode)?;

    // outlier branch: leaky-ReLU 0.1 stage, separable 5x5 filter, sigmoid
    let p_out = match &handles.outlier {
        None => None,
        Some(((hw, hb), sp, sr, sc)) => {
            let hid = ctx.conv2d(&shared, hw, hb, params.out_hidden.spec)?;
            let hid = ctx.leaky_relu(&hid, 0.1);
            let s1 = var_conv(ctx, sp, &params.out_sep_point, &hid, mode)?;
            let s2 = var_conv(ctx, sr, &params.out_sep_row, &s1, mode)?;
            let s3 = var_conv(ctx, sc, &params.out_sep_col, &s2, mode)?;
            Some(ctx.sigmoid(&s3))
        }
    };

    Ok((delta, p_out, shared, context))
}

/// Register parameters and run a single forward pass.
pub fn build_graph<C: Ctx>(
    ctx: &mut C,
    params: &RefinerParams,
    input: &RefinerInput,
    mode: &mut Mode<'_>,
    detach_outliers: bool,
) -> Result<GraphOutputs<C::Val>, RefinerError> {
    let (handles, priors) = register_all(ctx, params, detach_outliers);
    let (delta, p_out, shared, context) = forward_with(ctx, params, &handles, input, mode)?;
    Ok(GraphOutputs { delta, p_out, shared, context, priors })
}

/// Inference outputs: the correction and the outlier probability.
#[derive(Debug, Clone)]
pub struct RefinementOutput {
    pub delta: Tensor,
    pub p_out: Tensor,
}

/// Single forward pass in the given mode (eager: no tape, intermediates
/// freed as they go).
pub fn forward(
    input: &RefinerInput,
    params: &RefinerParams,
    mode: &mut Mode<'_>,
) -> Result<RefinementOutput, RefinerError> {
    let mut eager = crate::autodiff::Eager;
    let out = build_graph(&mut eager, params, input, mode, false)?;
    Ok(RefinementOutput {
        delta: out.delta,
        p_out: out.p_out.expect("outlier branch attached"),
    })
}

/// d-hat = d-tilde + delta at valid pixels; invalid pixels stay invalid.
pub fn predict_disparity(raw: &DisparityMap, output: &RefinementOutput) -> DisparityMap {
    let (w, h) = (raw.width(), raw.height());
    let mut out = DisparityMap::new(w, h);
    for y in 0..h {
        for x in 0..w {
            if raw.is_valid(x, y) {
                out.set(x, y, raw.get(x, y) + output.delta.at(0, y, x) as f32);
            }
        }
    }
    out
}

/// Monte-Carlo prediction: per-pixel mean and unbiased std of the refined
/// disparity over `n` stochastic passes, plus the mean outlier probability.
pub fn mc_predict(
    input: &RefinerInput,
    params: &RefinerParams,
    n: usize,
    seed: u64,
) -> Result<(Tensor, Tensor, Tensor), RefinerError> {
    if n < 2 {
        return Err(RefinerError::Config(format!(
            "monte-carlo prediction needs at least 2 samples, got {n}"
        )));
    }
    let shape = input.raw.shape();
    // Welford over the deltas; adding the raw disparity at the end avoids
    // cancellation against the large constant offset.
    let mut mean_d = Tensor::zeros(1, shape.height, shape.width);
    let mut m2 = Tensor::zeros(1, shape.height, shape.width);
    let mut p_sum = Tensor::zeros(1, shape.height, shape.width);
    for i in 0..n {
        let mut rng = stream_rng(seed, 0x3c00 + i as u64);
        let out = forward(input, params, &mut Mode::Stochastic(&mut rng))?;
        let count = (i + 1) as f64;
        for j in 0..mean_d.len() {
            let d = out.delta.data()[j];
            let diff = d - mean_d.data()[j];
            mean_d.data_mut()[j] += diff / count;
            m2.data_mut()[j] += diff * (d - mean_d.data()[j]);
            p_sum.data_mut()[j] += out.p_out.data()[j];
        }
    }
    let nf = n as f64;
    let mean = Tensor::from_vec(
        1,
        shape.height,
        shape.width,
        input
            .raw
            .data()
            .iter()
            .zip(mean_d.data())
            .map(|(r, d)| r + d)
            .collect(),
    );
    let std = m2.map(|v| (v / (nf - 1.0)).max(0.0).sqrt());
    let p_mean = p_sum.map(|v| v / nf);
    Ok((mean, std, p_mean))
}
