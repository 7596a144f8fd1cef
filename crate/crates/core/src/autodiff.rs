//! Reverse-mode automatic differentiation over rank-3 tensors.
//!
//! A [`Tape`] records operations in topological order during the forward
//! pass and replays them in reverse to accumulate gradients. The op set is
//! exactly what the refinement network and its loss need; there is no
//! general graph machinery.
//!
//! The [`Ctx`] trait abstracts over two execution modes: [`Eager`] evaluates
//! tensors directly (single-pass inference, intermediates freed as they go),
//! while `&mut Tape` records every node for a later [`Tape::backward`] call.
//! Network code is written once against `Ctx` and behaves identically in
//! both modes.

use crate::ops::{self, ConvSpec, OpError, Padding, PoolKind};
use crate::tensor::{Shape, Tensor};

/// Index of a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Caller-assigned identity of a trainable parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ParamId(pub usize);

enum Op {
    Const,
    Param,
    Conv2d { x: NodeId, w: NodeId, b: NodeId, spec: ConvSpec },
    Pool { x: NodeId, kind: PoolKind, factor: usize, arg: Vec<u32> },
    Upsample { x: NodeId, factor: usize },
    LeakyRelu { x: NodeId, slope: f64 },
    LeakyHardswish { x: NodeId, lambda: f64 },
    Sigmoid { x: NodeId },
    Dropout { x: NodeId, mask: Tensor },
    Reparam { mu: NodeId, rho: NodeId, eps: Tensor },
    Concat { xs: Vec<NodeId> },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Div { a: NodeId, b: NodeId },
    Affine { x: NodeId, mul: f64 },
    Ln { x: NodeId },
    Square { x: NodeId },
    WeightedSum { x: NodeId, weights: Tensor },
    KlGaussian { mu: NodeId, rho: NodeId, sigma_prior: f64 },
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Gradients keyed by [`ParamId`]; parameters not reached by the loss hold
/// zero tensors of the parameter's shape.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, pid: ParamId) -> Option<&Tensor> {
        self.grads.get(pid.0).and_then(|g| g.as_ref())
    }

    /// Euclidean norm over one parameter's gradient (0 if not registered).
    pub fn norm(&self, pid: ParamId) -> f64 {
        self.get(pid)
            .map(|g| g.iter().map(|v| v * v).sum::<f64>().sqrt())
            .unwrap_or(0.0)
    }
}

/// Recorded forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(ParamId, NodeId)>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), params: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, value, needs_grad });
        id
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Run the reverse pass from a scalar loss node. Visits each node exactly
    /// once, in reverse topological order.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, OpError> {
        if self.nodes[loss.0].value.shape().len() != 1 {
            return Err(OpError::NonScalarLoss(
                self.nodes[loss.0].value.shape().to_string(),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads);
            // Re-attach for param readout.
            grads[id] = Some(g);
        }

        let n = self.params.iter().map(|(p, _)| p.0 + 1).max().unwrap_or(0);
        let mut out: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        for &(pid, nid) in &self.params {
            let shape = self.nodes[nid.0].value.shape();
            let g = grads[nid.0]
                .take()
                .unwrap_or_else(|| Tensor::zeros(shape.channels, shape.height, shape.width));
            out[pid.0] = Some(g);
        }
        Ok(Gradients { grads: out })
    }

    fn backprop_node(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let acc = |grads: &mut [Option<Tensor>], target: NodeId, delta: Tensor| {
            match &mut grads[target.0] {
                Some(t) => {
                    for (a, b) in t.data_mut().iter_mut().zip(delta.data()) {
                        *a += b;
                    }
                }
                slot => *slot = Some(delta),
            }
        };
        match &self.nodes[id].op {
            Op::Const | Op::Param => {}
            Op::Conv2d { x, w, b, spec } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                if self.needs(*b) {
                    acc(grads, *b, conv2d_bias_grad(g, *spec));
                }
                if self.needs(*w) {
                    acc(grads, *w, conv2d_weight_grad(xv, g, *spec));
                }
                if self.needs(*x) {
                    acc(grads, *x, conv2d_input_grad(wv, g, xv.shape(), *spec));
                }
            }
            Op::Pool { x, kind, factor, arg } => {
                if self.needs(*x) {
                    let xs = self.value(*x).shape();
                    acc(grads, *x, pool_grad(g, xs, *kind, *factor, arg));
                }
            }
            Op::Upsample { x, factor } => {
                if self.needs(*x) {
                    let xs = self.value(*x).shape();
                    acc(grads, *x, upsample_grad(g, xs, *factor));
                }
            }
            Op::LeakyRelu { x, slope } => {
                if self.needs(*x) {
                    let xv = self.value(*x);
                    acc(grads, *x, g.zip(xv, |gv, v| gv * ops::leaky_relu_deriv(v, *slope)));
                }
            }
            Op::LeakyHardswish { x, lambda } => {
                if self.needs(*x) {
                    let xv = self.value(*x);
                    acc(
                        grads,
                        *x,
                        g.zip(xv, |gv, v| gv * ops::leaky_hardswish_deriv(v, *lambda)),
                    );
                }
            }
            Op::Sigmoid { x } => {
                if self.needs(*x) {
                    let yv = &self.nodes[id].value;
                    acc(grads, *x, g.zip(yv, |gv, y| gv * y * (1.0 - y)));
                }
            }
            Op::Dropout { x, mask } => {
                if self.needs(*x) {
                    acc(grads, *x, g.zip(mask, |gv, m| gv * m));
                }
            }
            Op::Reparam { mu, rho, eps } => {
                if self.needs(*mu) {
                    acc(grads, *mu, g.clone());
                }
                if self.needs(*rho) {
                    let rv = self.value(*rho);
                    let mut d = g.zip(eps, |gv, e| gv * e);
                    for (dv, r) in d.data_mut().iter_mut().zip(rv.data()) {
                        *dv *= ops::sigmoid_scalar(*r);
                    }
                    acc(grads, *rho, d);
                }
            }
            Op::Concat { xs } => {
                let mut offset = 0usize;
                for &part in xs {
                    let ps = self.value(part).shape();
                    let n = ps.len();
                    if self.needs(part) {
                        let mut d = Tensor::zeros(ps.channels, ps.height, ps.width);
                        d.data_mut().copy_from_slice(&g.data()[offset..offset + n]);
                        acc(grads, part, d);
                    }
                    offset += n;
                }
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    acc(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    acc(grads, *b, g.clone());
                }
            }
            Op::Sub { a, b } => {
                if self.needs(*a) {
                    acc(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    acc(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    acc(grads, *a, g.zip(self.value(*b), |gv, bv| gv * bv));
                }
                if self.needs(*b) {
                    acc(grads, *b, g.zip(self.value(*a), |gv, av| gv * av));
                }
            }
            Op::Div { a, b } => {
                let bv = self.value(*b);
                if self.needs(*a) {
                    acc(grads, *a, g.zip(bv, |gv, y| gv / y));
                }
                if self.needs(*b) {
                    let av = self.value(*a);
                    let mut d = g.zip(av, |gv, x| -gv * x);
                    for (dv, y) in d.data_mut().iter_mut().zip(bv.data()) {
                        *dv /= y * y;
                    }
                    acc(grads, *b, d);
                }
            }
            Op::Affine { x, mul } => {
                if self.needs(*x) {
                    acc(grads, *x, g.map(|v| v * mul));
                }
            }
            Op::Ln { x } => {
                if self.needs(*x) {
                    acc(grads, *x, g.zip(self.value(*x), |gv, v| gv / v));
                }
            }
            Op::Square { x } => {
                if self.needs(*x) {
                    acc(grads, *x, g.zip(self.value(*x), |gv, v| gv * 2.0 * v));
                }
            }
            Op::WeightedSum { x, weights } => {
                if self.needs(*x) {
                    let gs = g.item();
                    acc(grads, *x, weights.map(|w| gs * w));
                }
            }
            Op::KlGaussian { mu, rho, sigma_prior } => {
                let gs = g.item();
                let sp2 = sigma_prior * sigma_prior;
                if self.needs(*mu) {
                    acc(grads, *mu, self.value(*mu).map(|m| gs * m / sp2));
                }
                if self.needs(*rho) {
                    let d = self.value(*rho).map(|r| {
                        let s = ops::softplus(r);
                        gs * (-1.0 / s + s / sp2) * ops::sigmoid_scalar(r)
                    });
                    acc(grads, *rho, d);
                }
            }
        }
    }
}

fn conv2d_bias_grad(g: &Tensor, spec: ConvSpec) -> Tensor {
    let mut out = Tensor::zeros(spec.out_ch, 1, 1);
    for o in 0..spec.out_ch {
        out.data_mut()[o] = g.plane(o).iter().sum();
    }
    out
}

fn conv2d_weight_grad(x: &Tensor, g: &Tensor, spec: ConvSpec) -> Tensor {
    let (h, w) = (x.height(), x.width());
    let (oh, ow) = (g.height(), g.width());
    let (pad_y, pad_x) = match spec.padding {
        Padding::Same => ((spec.kh - 1) / 2, (spec.kw - 1) / 2),
        Padding::Valid => (0, 0),
    };
    let mut out = Tensor::zeros(spec.out_ch * spec.in_ch, spec.kh, spec.kw);
    let chunk = spec.in_ch * spec.kh * spec.kw;
    let run = |o: usize, dst: &mut [f64]| {
        let gp = g.plane(o);
        for ic in 0..spec.in_ch {
            let xp = x.plane(ic);
            for ky in 0..spec.kh {
                for kx in 0..spec.kw {
                    let mut s = 0.0;
                    for oy in 0..oh {
                        let sy = oy + ky;
                        if sy < pad_y || sy - pad_y >= h {
                            continue;
                        }
                        let sy = sy - pad_y;
                        let ox_lo = pad_x.saturating_sub(kx);
                        let ox_hi = (w + pad_x - kx).min(ow);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let sx_lo = ox_lo + kx - pad_x;
                        let grow = &gp[oy * ow + ox_lo..oy * ow + ox_hi];
                        let xrow = &xp[sy * w + sx_lo..sy * w + sx_lo + grow.len()];
                        for (gv, xv) in grow.iter().zip(xrow) {
                            s += gv * xv;
                        }
                    }
                    dst[(ic * spec.kh + ky) * spec.kw + kx] = s;
                }
            }
        }
    };
    if spec.out_ch * chunk * oh * ow > 1 << 18 {
        use rayon::prelude::*;
        out.data_mut()
            .par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(o, dst)| run(o, dst));
    } else {
        for o in 0..spec.out_ch {
            run(o, &mut out.data_mut()[o * chunk..(o + 1) * chunk]);
        }
    }
    out
}

fn conv2d_input_grad(weights: &Tensor, g: &Tensor, x_shape: Shape, spec: ConvSpec) -> Tensor {
    let (h, w) = (x_shape.height, x_shape.width);
    let (oh, ow) = (g.height(), g.width());
    let (pad_y, pad_x) = match spec.padding {
        Padding::Same => ((spec.kh - 1) / 2, (spec.kw - 1) / 2),
        Padding::Valid => (0, 0),
    };
    let mut out = Tensor::zeros(spec.in_ch, h, w);
    let plane = h * w;
    let run = |ic: usize, dst: &mut [f64]| {
        for o in 0..spec.out_ch {
            let gp = g.plane(o);
            for ky in 0..spec.kh {
                for kx in 0..spec.kw {
                    let wv = weights.at(o * spec.in_ch + ic, ky, kx);
                    if wv == 0.0 {
                        continue;
                    }
                    // x[sy][sx] contributed to out[sy + pad_y - ky][sx + pad_x - kx]
                    for sy in 0..h {
                        let oy = sy + pad_y;
                        if oy < ky || oy - ky >= oh {
                            continue;
                        }
                        let oy = oy - ky;
                        let sx_lo = kx.saturating_sub(pad_x);
                        let sx_hi = (ow + kx - pad_x).min(w);
                        if sx_lo >= sx_hi {
                            continue;
                        }
                        let ox_lo = sx_lo + pad_x - kx;
                        let drow = &mut dst[sy * w + sx_lo..sy * w + sx_hi];
                        let grow = &gp[oy * ow + ox_lo..oy * ow + ox_lo + (sx_hi - sx_lo)];
                        for (d, gv) in drow.iter_mut().zip(grow) {
                            *d += wv * gv;
                        }
                    }
                }
            }
        }
    };
    if spec.out_ch * spec.in_ch * spec.kh * spec.kw * plane > 1 << 18 {
        use rayon::prelude::*;
        out.data_mut()
            .par_chunks_mut(plane)
            .enumerate()
            .for_each(|(ic, dst)| run(ic, dst));
    } else {
        for ic in 0..spec.in_ch {
            run(ic, &mut out.data_mut()[ic * plane..(ic + 1) * plane]);
        }
    }
    out
}

fn pool_grad(g: &Tensor, x_shape: Shape, kind: PoolKind, factor: usize, arg: &[u32]) -> Tensor {
    let mut out = Tensor::zeros(x_shape.channels, x_shape.height, x_shape.width);
    match kind {
        PoolKind::Min | PoolKind::Max => {
            for (i, &src) in arg.iter().enumerate() {
                out.data_mut()[src as usize] += g.data()[i];
            }
        }
        PoolKind::Avg => {
            let (h, w) = (x_shape.height, x_shape.width);
            let (oh, ow) = (g.height(), g.width());
            let inv = 1.0 / (factor * factor) as f64;
            for c in 0..x_shape.channels {
                let gp = g.plane(c);
                for oy in 0..oh {
                    for ox in 0..ow {
                        let gv = gp[oy * ow + ox] * inv;
                        for dy in 0..factor {
                            let sy = (oy * factor + dy).min(h - 1);
                            for dx in 0..factor {
                                let sx = (ox * factor + dx).min(w - 1);
                                out.data_mut()[(c * h + sy) * w + sx] += gv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn upsample_grad(g: &Tensor, x_shape: Shape, factor: usize) -> Tensor {
    let mut out = Tensor::zeros(x_shape.channels, x_shape.height, x_shape.width);
    let (th, tw) = (g.height(), g.width());
    for c in 0..x_shape.channels {
        let gp = g.plane(c);
        for sy in 0..x_shape.height {
            for sx in 0..x_shape.width {
                let mut s = 0.0;
                for y in sy * factor..((sy + 1) * factor).min(th) {
                    for x in sx * factor..((sx + 1) * factor).min(tw) {
                        s += gp[y * tw + x];
                    }
                }
                out.set(c, sy, sx, s);
            }
        }
    }
    out
}

/// Execution context the network code is generic over: either an [`Eager`]
/// evaluator or a recording [`Tape`].
pub trait Ctx {
    type Val: Clone;

    /// Introduce a tensor with no gradient.
    fn constant(&mut self, t: Tensor) -> Self::Val;
    /// Introduce a trainable parameter (snapshot).
    fn param(&mut self, pid: ParamId, t: &Tensor) -> Self::Val;
    fn value<'a>(&'a self, v: &'a Self::Val) -> &'a Tensor;

    fn conv2d(
        &mut self,
        x: &Self::Val,
        w: &Self::Val,
        b: &Self::Val,
        spec: ConvSpec,
    ) -> Result<Self::Val, OpError>;
    fn pool(&mut self, x: &Self::Val, kind: PoolKind, factor: usize) -> Result<Self::Val, OpError>;
    fn upsample(
        &mut self,
        x: &Self::Val,
        factor: usize,
        th: usize,
        tw: usize,
    ) -> Result<Self::Val, OpError>;
    fn leaky_relu(&mut self, x: &Self::Val, slope: f64) -> Self::Val;
    fn leaky_hardswish(&mut self, x: &Self::Val, lambda: f64) -> Self::Val;
    fn sigmoid(&mut self, x: &Self::Val) -> Self::Val;
    /// Apply a precomputed inverted-dropout mask.
    fn dropout(&mut self, x: &Self::Val, mask: Tensor) -> Self::Val;
    /// w = mu + softplus(rho) * eps, with eps drawn by the caller.
    fn reparam(&mut self, mu: &Self::Val, rho: &Self::Val, eps: Tensor) -> Self::Val;
    fn concat(&mut self, xs: &[&Self::Val]) -> Result<Self::Val, OpError>;

    fn add(&mut self, a: &Self::Val, b: &Self::Val) -> Self::Val;
    fn sub(&mut self, a: &Self::Val, b: &Self::Val) -> Self::Val;
    fn mul(&mut self, a: &Self::Val, b: &Self::Val) -> Self::Val;
    fn div(&mut self, a: &Self::Val, b: &Self::Val) -> Self::Val;
    fn affine(&mut self, x: &Self::Val, mul: f64, add: f64) -> Self::Val;
    fn ln(&mut self, x: &Self::Val) -> Self::Val;
    fn square(&mut self, x: &Self::Val) -> Self::Val;
    /// Scalar-valued weighted sum with constant weights.
    fn weighted_sum(&mut self, x: &Self::Val, weights: Tensor) -> Self::Val;
    fn kl_gaussian(&mut self, mu: &Self::Val, rho: &Self::Val, sigma_prior: f64) -> Self::Val;
}

fn reparam_value(mu: &Tensor, rho: &Tensor, eps: &Tensor) -> Tensor {
    assert_eq!(mu.shape(), rho.shape());
    assert_eq!(mu.shape(), eps.shape());
    let mut out = mu.clone();
    for ((o, r), e) in out.data_mut().iter_mut().zip(rho.data()).zip(eps.data()) {
        *o += ops::softplus(*r) * e;
    }
    out
}

fn kl_gaussian_value(mu: &Tensor, rho: &Tensor, sigma_prior: f64) -> f64 {
    let sp2 = 2.0 * sigma_prior * sigma_prior;
    let mut total = 0.0;
    for (m, r) in mu.data().iter().zip(rho.data()) {
        let s = ops::softplus(*r);
        total += (sigma_prior / s).ln() + (s * s + m * m) / sp2 - 0.5;
    }
    total
}

/// Direct evaluator: every `Val` is just the computed tensor.
pub struct Eager;

impl Ctx for Eager {
    type Val = Tensor;

    fn constant(&mut self, t: Tensor) -> Tensor {
        t
    }

    fn param(&mut self, _pid: ParamId, t: &Tensor) -> Tensor {
        t.clone()
    }

    fn value<'a>(&'a self, v: &'a Tensor) -> &'a Tensor {
        v
    }

    fn conv2d(&mut self, x: &Tensor, w: &Tensor, b: &Tensor, spec: ConvSpec) -> Result<Tensor, OpError> {
        ops::conv2d(x, w, b, spec)
    }

    fn pool(&mut self, x: &Tensor, kind: PoolKind, factor: usize) -> Result<Tensor, OpError> {
        Ok(ops::pool(x, kind, factor)?.out)
    }

    fn upsample(&mut self, x: &Tensor, factor: usize, th: usize, tw: usize) -> Result<Tensor, OpError> {
        ops::upsample_nearest(x, factor, th, tw)
    }

    fn leaky_relu(&mut self, x: &Tensor, slope: f64) -> Tensor {
        ops::leaky_relu(x, slope)
    }

    fn leaky_hardswish(&mut self, x: &Tensor, lambda: f64) -> Tensor {
        ops::leaky_hardswish(x, lambda)
    }

    fn sigmoid(&mut self, x: &Tensor) -> Tensor {
        ops::sigmoid(x)
    }

    fn dropout(&mut self, x: &Tensor, mask: Tensor) -> Tensor {
        x.zip(&mask, |a, m| a * m)
    }

    fn reparam(&mut self, mu: &Tensor, rho: &Tensor, eps: Tensor) -> Tensor {
        reparam_value(mu, rho, &eps)
    }

    fn concat(&mut self, xs: &[&Tensor]) -> Result<Tensor, OpError> {
        ops::concat_channels(xs)
    }

    fn add(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        a.zip(b, |x, y| x + y)
    }

    fn sub(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        a.zip(b, |x, y| x - y)
    }

    fn mul(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        a.zip(b, |x, y| x * y)
    }

    fn div(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        a.zip(b, |x, y| x / y)
    }

    fn affine(&mut self, x: &Tensor, mul: f64, add: f64) -> Tensor {
        x.map(|v| v * mul + add)
    }

    fn ln(&mut self, x: &Tensor) -> Tensor {
        x.map(f64::ln)
    }

    fn square(&mut self, x: &Tensor) -> Tensor {
        x.map(|v| v * v)
    }

    fn weighted_sum(&mut self, x: &Tensor, weights: Tensor) -> Tensor {
        assert_eq!(x.shape(), weights.shape());
        let mut s = 0.0;
        for (v, w) in x.data().iter().zip(weights.data()) {
            s += v * w;
        }
        Tensor::scalar(s)
    }

    fn kl_gaussian(&mut self, mu: &Tensor, rho: &Tensor, sigma_prior: f64) -> Tensor {
        Tensor::scalar(kl_gaussian_value(mu, rho, sigma_prior))
    }
}

impl Ctx for Tape {
    type Val = NodeId;

    fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Const, t, false)
    }

    fn param(&mut self, pid: ParamId, t: &Tensor) -> NodeId {
        let id = self.push(Op::Param, t.clone(), true);
        self.params.push((pid, id));
        id
    }

    fn value<'a>(&'a self, v: &'a NodeId) -> &'a Tensor {
        Tape::value(self, *v)
    }

    fn conv2d(&mut self, x: &NodeId, w: &NodeId, b: &NodeId, spec: ConvSpec) -> Result<NodeId, OpError> {
        let v = ops::conv2d(self.value(*x), self.value(*w), self.value(*b), spec)?;
        let needs = self.needs(*x) || self.needs(*w) || self.needs(*b);
        Ok(self.push(Op::Conv2d { x: *x, w: *w, b: *b, spec }, v, needs))
    }

    fn pool(&mut self, x: &NodeId, kind: PoolKind, factor: usize) -> Result<NodeId, OpError> {
        let r = ops::pool(self.value(*x), kind, factor)?;
        let needs = self.needs(*x);
        Ok(self.push(Op::Pool { x: *x, kind, factor, arg: r.arg }, r.out, needs))
    }

    fn upsample(&mut self, x: &NodeId, factor: usize, th: usize, tw: usize) -> Result<NodeId, OpError> {
        let v = ops::upsample_nearest(self.value(*x), factor, th, tw)?;
        let needs = self.needs(*x);
        Ok(self.push(Op::Upsample { x: *x, factor }, v, needs))
    }

    fn leaky_relu(&mut self, x: &NodeId, slope: f64) -> NodeId {
        let v = ops::leaky_relu(self.value(*x), slope);
        let needs = self.needs(*x);
        self.push(Op::LeakyRelu { x: *x, slope }, v, needs)
    }

    fn leaky_hardswish(&mut self, x: &NodeId, lambda: f64) -> NodeId {
        let v = ops::leaky_hardswish(self.value(*x), lambda);
        let needs = self.needs(*x);
        self.push(Op::LeakyHardswish { x: *x, lambda }, v, needs)
    }

    fn sigmoid(&mut self, x: &NodeId) -> NodeId {
        let v = ops::sigmoid(self.value(*x));
        let needs = self.needs(*x);
        self.push(Op::Sigmoid { x: *x }, v, needs)
    }

    fn dropout(&mut self, x: &NodeId, mask: Tensor) -> NodeId {
        let v = self.value(*x).zip(&mask, |a, m| a * m);
        let needs = self.needs(*x);
        self.push(Op::Dropout { x: *x, mask }, v, needs)
    }

    fn reparam(&mut self, mu: &NodeId, rho: &NodeId, eps: Tensor) -> NodeId {
        let v = reparam_value(self.value(*mu), self.value(*rho), &eps);
        let needs = self.needs(*mu) || self.needs(*rho);
        self.push(Op::Reparam { mu: *mu, rho: *rho, eps }, v, needs)
    }

    fn concat(&mut self, xs: &[&NodeId]) -> Result<NodeId, OpError> {
        let tensors: Vec<&Tensor> = xs.iter().map(|id| Tape::value(self, **id)).collect();
        let v = ops::concat_channels(&tensors)?;
        let ids: Vec<NodeId> = xs.iter().map(|id| **id).collect();
        let needs = ids.iter().any(|id| self.needs(*id));
        Ok(self.push(Op::Concat { xs: ids }, v, needs))
    }

    fn add(&mut self, a: &NodeId, b: &NodeId) -> NodeId {
        let v = self.value(*a).zip(self.value(*b), |x, y| x + y);
        let needs = self.needs(*a) || self.needs(*b);
        self.push(Op::Add { a: *a, b: *b }, v, needs)
    }

    fn sub(&mut self, a: &NodeId, b: &NodeId) -> NodeId {
        let v = self.value(*a).zip(self.value(*b), |x, y| x - y);
        let needs = self.needs(*a) || self.needs(*b);
        self.push(Op::Sub { a: *a, b: *b }, v, needs)
    }

    fn mul(&mut self, a: &NodeId, b: &NodeId) -> NodeId {
        let v = self.value(*a).zip(self.value(*b), |x, y| x * y);
        let needs = self.needs(*a) || self.needs(*b);
        self.push(Op::Mul { a: *a, b: *b }, v, needs)
    }

    fn div(&mut self, a: &NodeId, b: &NodeId) -> NodeId {
        let v = self.value(*a).zip(self.value(*b), |x, y| x / y);
        let needs = self.needs(*a) || self.needs(*b);
        self.push(Op::Div { a: *a, b: *b }, v, needs)
    }

    fn affine(&mut self, x: &NodeId, mul: f64, add: f64) -> NodeId {
        let v = self.value(*x).map(|v| v * mul + add);
        let needs = self.needs(*x);
        self.push(Op::Affine { x: *x, mul }, v, needs)
    }

    fn ln(&mut self, x: &NodeId) -> NodeId {
        let v = self.value(*x).map(f64::ln);
        let needs = self.needs(*x);
        self.push(Op::Ln { x: *x }, v, needs)
    }

    fn square(&mut self, x: &NodeId) -> NodeId {
        let v = self.value(*x).map(|v| v * v);
        let needs = self.needs(*x);
        self.push(Op::Square { x: *x }, v, needs)
    }

    fn weighted_sum(&mut self, x: &NodeId, weights: Tensor) -> NodeId {
        let xv = self.value(*x);
        assert_eq!(xv.shape(), weights.shape());
        let mut s = 0.0;
        for (v, w) in xv.data().iter().zip(weights.data()) {
            s += v * w;
        }
        let needs = self.needs(*x);
        self.push(Op::WeightedSum { x: *x, weights }, Tensor::scalar(s), needs)
    }

    fn kl_gaussian(&mut self, mu: &NodeId, rho: &NodeId, sigma_prior: f64) -> NodeId {
        let v = kl_gaussian_value(self.value(*mu), self.value(*rho), sigma_prior);
        let needs = self.needs(*mu) || self.needs(*rho);
        self.push(Op::KlGaussian { mu: *mu, rho: *rho, sigma_prior }, Tensor::scalar(v), needs)
    }
}
