//! Minimal reverse-mode autodiff over 4-D `ndarray` tensors.
//!
//! A [`Tape`] records operations eagerly (define-by-run) and replays them in
//! reverse for gradients. Tensors are `(N, C, H, W)` throughout; scalars are
//! `(1, 1, 1, 1)`. The op set is exactly what the super-resolution network
//! needs: convolution, modulated deformable convolution, bilinear warping,
//! resampling, pointwise activations and the Charbonnier loss.
//!
//! Everything is generic over [`Real`] so the same kernels run in `f32` for
//! training and `f64` for finite-difference gradient checks.

pub mod conv;
pub mod deform;
pub mod resample;
pub mod warp;

use crate::error::{Error, Result};
use ndarray::{Array4, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign};

/// Scalar type the tape and kernels are generic over.
pub trait Real:
    Float
    + LinalgScalar
    + ScalarOperand
    + FromPrimitive
    + ToPrimitive
    + Sum
    + AddAssign
    + MulAssign
    + Send
    + Sync
    + Display
    + Debug
    + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

/// Shorthand for lifting an `f64` constant into `T`.
#[inline]
pub fn c<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("constant conversion")
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op<T: Real> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        pad: usize,
        groups: usize,
    },
    DeformConv {
        input: Var,
        offsets: Var,
        masks: Var,
        weight: Var,
        bias: Option<Var>,
        pad: usize,
        groups: usize,
        deform_groups: usize,
        /// Unmasked bilinear samples saved by the forward pass,
        /// shape `(Ci*K*K, N*Ho*Wo)`.
        raw: ndarray::Array2<T>,
    },
    Warp {
        src: Var,
        flow: Var,
    },
    LeakyRelu {
        input: Var,
        slope: T,
    },
    Sigmoid {
        input: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: T,
    },
    ConcatChannels {
        parts: Vec<Var>,
    },
    SliceChannels {
        input: Var,
        start: usize,
    },
    RepeatFlowTaps {
        flow: Var,
        copies: usize,
    },
    PixelShuffle {
        input: Var,
        factor: usize,
    },
    BilinearUp {
        input: Var,
        factor: usize,
    },
    AvgPool2 {
        input: Var,
    },
    Clamp {
        input: Var,
        lo: T,
        hi: T,
    },
    Charbonnier {
        pred: Var,
        target: Var,
        eps: T,
    },
}

struct Node<T: Real> {
    value: Array4<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Wengert list holding values, ops and (after [`Tape::backward`]) gradients.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Array4<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array4<T>, op: Op<T>, needs_grad: bool) -> Var {
        // Backward never visits no-grad nodes, so their op payloads (saved
        // sample matrices in particular) can be dropped immediately. This
        // keeps pure-inference graphs from retaining backward state.
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Leaf that does not receive a gradient (network inputs, loss targets).
    pub fn input(&mut self, value: Array4<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that accumulates a gradient (learnable weights).
    pub fn param(&mut self, value: Array4<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Array4<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Array4<T>> {
        self.grads[v.0].as_ref()
    }

    /// Value of a `(1,1,1,1)` node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[[0, 0, 0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize, usize, usize) {
        let d = self.nodes[v.0].value.dim();
        (d.0, d.1, d.2, d.3)
    }

    // ---------------------------------------------------------------- ops

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        pad: usize,
        groups: usize,
    ) -> Result<Var> {
        let (n, ci, h, w) = self.shape(input);
        let (co, cig, kh, kw) = self.shape(weight);
        if kh != kw {
            return Err(Error::ShapeMismatch(format!(
                "conv2d: non-square kernel {kh}x{kw}"
            )));
        }
        if groups == 0 || ci % groups != 0 || co % groups != 0 || cig != ci / groups {
            return Err(Error::ShapeMismatch(format!(
                "conv2d: channels in={ci} out={co} incompatible with groups={groups} (weight expects {cig} per group)"
            )));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::ShapeMismatch(format!(
                "conv2d: input {h}x{w} smaller than kernel {kh} with pad {pad}"
            )));
        }
        if let Some(b) = bias {
            let bd = self.shape(b);
            if bd != (1, co, 1, 1) {
                return Err(Error::ShapeMismatch(format!(
                    "conv2d: bias shape {bd:?}, expected (1,{co},1,1)"
                )));
            }
        }
        let _ = n;
        let out = conv::conv2d_forward(
            &self.nodes[input.0].value,
            &self.nodes[weight.0].value,
            bias.map(|b| &self.nodes[b.0].value),
            pad,
            groups,
        );
        let needs =
            self.needs(input) || self.needs(weight) || bias.map(|b| self.needs(b)).unwrap_or(false);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                pad,
                groups,
            },
            needs,
        ))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn deform_conv(
        &mut self,
        input: Var,
        offsets: Var,
        masks: Var,
        weight: Var,
        bias: Option<Var>,
        pad: usize,
        groups: usize,
        deform_groups: usize,
    ) -> Result<Var> {
        let (n, ci, h, w) = self.shape(input);
        let (co, cig, kh, kw) = self.shape(weight);
        if kh != kw || kh % 2 == 0 {
            return Err(Error::ShapeMismatch(format!(
                "deform_conv: kernel must be square and odd, got {kh}x{kw}"
            )));
        }
        let k = kh;
        if groups == 0 || ci % groups != 0 || co % groups != 0 || cig != ci / groups {
            return Err(Error::ShapeMismatch(format!(
                "deform_conv: channels in={ci} out={co} incompatible with groups={groups}"
            )));
        }
        if deform_groups == 0 || ci % deform_groups != 0 {
            return Err(Error::ShapeMismatch(format!(
                "deform_conv: input channels {ci} not divisible by deform_groups={deform_groups}"
            )));
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::ShapeMismatch(format!(
                "deform_conv: input {h}x{w} smaller than kernel {k} with pad {pad}"
            )));
        }
        let ho = h + 2 * pad + 1 - k;
        let wo = w + 2 * pad + 1 - k;
        let od = self.shape(offsets);
        if od != (n, 2 * k * k * deform_groups, ho, wo) {
            return Err(Error::ShapeMismatch(format!(
                "deform_conv: offsets shape {:?}, expected ({n},{},{ho},{wo})",
                od,
                2 * k * k * deform_groups
            )));
        }
        let md = self.shape(masks);
        if md != (n, k * k * deform_groups, ho, wo) {
            return Err(Error::ShapeMismatch(format!(
                "deform_conv: masks shape {:?}, expected ({n},{},{ho},{wo})",
                md,
                k * k * deform_groups
            )));
        }
        if let Some(b) = bias {
            let bd = self.shape(b);
            if bd != (1, co, 1, 1) {
                return Err(Error::ShapeMismatch(format!(
                    "deform_conv: bias shape {bd:?}, expected (1,{co},1,1)"
                )));
            }
        }
        {
            let m = &self.nodes[masks.0].value;
            for &v in m.iter() {
                if !(v >= T::zero() && v <= T::one()) {
                    return Err(Error::InvariantViolation(format!(
                        "deform_conv: modulation mask value {v} outside [0,1]"
                    )));
                }
            }
        }
        let (out, raw) = deform::deform_conv_forward(
            &self.nodes[input.0].value,
            &self.nodes[offsets.0].value,
            &self.nodes[masks.0].value,
            &self.nodes[weight.0].value,
            bias.map(|b| &self.nodes[b.0].value),
            pad,
            groups,
            deform_groups,
        );
        let needs = self.needs(input)
            || self.needs(offsets)
            || self.needs(masks)
            || self.needs(weight)
            || bias.map(|b| self.needs(b)).unwrap_or(false);
        Ok(self.push(
            out,
            Op::DeformConv {
                input,
                offsets,
                masks,
                weight,
                bias,
                pad,
                groups,
                deform_groups,
                raw,
            },
            needs,
        ))
    }

    pub fn warp(&mut self, src: Var, flow: Var) -> Result<Var> {
        let (n, _, h, w) = self.shape(src);
        let fd = self.shape(flow);
        if fd != (n, 2, h, w) {
            return Err(Error::ShapeMismatch(format!(
                "warp: flow shape {fd:?}, expected ({n},2,{h},{w})"
            )));
        }
        let out = warp::warp_forward(&self.nodes[src.0].value, &self.nodes[flow.0].value);
        let needs = self.needs(src) || self.needs(flow);
        Ok(self.push(out, Op::Warp { src, flow }, needs))
    }

    pub fn leaky_relu(&mut self, input: Var, slope: f64) -> Var {
        let s = c::<T>(slope);
        let out = self.nodes[input.0]
            .value
            .mapv(|v| if v >= T::zero() { v } else { v * s });
        let needs = self.needs(input);
        self.push(out, Op::LeakyRelu { input, slope: s }, needs)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let one = T::one();
        let out = self.nodes[input.0]
            .value
            .mapv(|v| one / (one + (-v).exp()));
        let needs = self.needs(input);
        self.push(out, Op::Sigmoid { input }, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch(format!(
                "add: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add { a, b }, needs))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let f = c::<T>(factor);
        let out = self.nodes[input.0].value.mapv(|v| v * f);
        let needs = self.needs(input);
        self.push(out, Op::Scale { input, factor: f }, needs)
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        assert!(!parts.is_empty());
        let (n, _, h, w) = self.shape(parts[0]);
        let mut ctot = 0;
        for &p in parts {
            let (pn, pc, ph, pw) = self.shape(p);
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::ShapeMismatch(format!(
                    "concat_channels: {:?} vs ({n},_,{h},{w})",
                    self.shape(p)
                )));
            }
            ctot += pc;
        }
        let mut out = Array4::zeros((n, ctot, h, w));
        let mut at = 0;
        for &p in parts {
            let pc = self.shape(p).1;
            out.slice_mut(ndarray::s![.., at..at + pc, .., ..])
                .assign(&self.nodes[p.0].value);
            at += pc;
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            out,
            Op::ConcatChannels {
                parts: parts.to_vec(),
            },
            needs,
        ))
    }

    pub fn slice_channels(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let (_, ci, _, _) = self.shape(input);
        if start + len > ci {
            return Err(Error::ShapeMismatch(format!(
                "slice_channels: [{start}, {}) out of {ci} channels",
                start + len
            )));
        }
        let out = self.nodes[input.0]
            .value
            .slice(ndarray::s![.., start..start + len, .., ..])
            .to_owned();
        let needs = self.needs(input);
        Ok(self.push(out, Op::SliceChannels { input, start }, needs))
    }

    /// Broadcast a 2-channel flow to `copies` tap pairs: output channel
    /// `2j` copies flow channel 0 (dx) and `2j+1` copies channel 1 (dy).
    pub fn repeat_flow_taps(&mut self, flow: Var, copies: usize) -> Result<Var> {
        let (n, cf, h, w) = self.shape(flow);
        if cf != 2 {
            return Err(Error::ShapeMismatch(format!(
                "repeat_flow_taps: expected 2 channels, got {cf}"
            )));
        }
        let mut out = Array4::zeros((n, 2 * copies, h, w));
        let fv = &self.nodes[flow.0].value;
        for j in 0..copies {
            out.slice_mut(ndarray::s![.., 2 * j, .., ..])
                .assign(&fv.slice(ndarray::s![.., 0, .., ..]));
            out.slice_mut(ndarray::s![.., 2 * j + 1, .., ..])
                .assign(&fv.slice(ndarray::s![.., 1, .., ..]));
        }
        let needs = self.needs(flow);
        Ok(self.push(out, Op::RepeatFlowTaps { flow, copies }, needs))
    }

    pub fn pixel_shuffle(&mut self, input: Var, factor: usize) -> Result<Var> {
        let (_, ci, _, _) = self.shape(input);
        if factor == 0 || ci % (factor * factor) != 0 {
            return Err(Error::ShapeMismatch(format!(
                "pixel_shuffle: {ci} channels not divisible by {factor}^2"
            )));
        }
        let out = resample::pixel_shuffle_forward(&self.nodes[input.0].value, factor);
        let needs = self.needs(input);
        Ok(self.push(out, Op::PixelShuffle { input, factor }, needs))
    }

    pub fn bilinear_upsample(&mut self, input: Var, factor: usize) -> Var {
        assert!(factor >= 1);
        let out = resample::bilinear_up_forward(&self.nodes[input.0].value, factor);
        let needs = self.needs(input);
        self.push(out, Op::BilinearUp { input, factor }, needs)
    }

    pub fn avg_pool2(&mut self, input: Var) -> Result<Var> {
        let (_, _, h, w) = self.shape(input);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::ShapeMismatch(format!(
                "avg_pool2: odd spatial dims {h}x{w}"
            )));
        }
        let out = resample::avg_pool2_forward(&self.nodes[input.0].value);
        let needs = self.needs(input);
        Ok(self.push(out, Op::AvgPool2 { input }, needs))
    }

    pub fn clamp(&mut self, input: Var, lo: f64, hi: f64) -> Var {
        let (lo, hi) = (c::<T>(lo), c::<T>(hi));
        let out = self.nodes[input.0].value.mapv(|v| {
            if v < lo {
                lo
            } else if v > hi {
                hi
            } else {
                v
            }
        });
        let needs = self.needs(input);
        self.push(out, Op::Clamp { input, lo, hi }, needs)
    }

    /// Mean over all elements of `sqrt((pred-target)^2 + eps)`, as a scalar node.
    pub fn charbonnier(&mut self, pred: Var, target: Var, eps: f64) -> Result<Var> {
        if self.shape(pred) != self.shape(target) {
            return Err(Error::ShapeMismatch(format!(
                "charbonnier: {:?} vs {:?}",
                self.shape(pred),
                self.shape(target)
            )));
        }
        if eps <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "charbonnier: eps must be positive, got {eps}"
            )));
        }
        let e = c::<T>(eps);
        let p = &self.nodes[pred.0].value;
        let t = &self.nodes[target.0].value;
        let mut acc = 0f64;
        for (a, b) in p.iter().zip(t.iter()) {
            let d = *a - *b;
            acc += (d * d + e).sqrt().to_f64().unwrap();
        }
        let mean = acc / p.len() as f64;
        let out = Array4::from_elem((1, 1, 1, 1), c::<T>(mean));
        let needs = self.needs(pred) || self.needs(target);
        Ok(self.push(
            out,
            Op::Charbonnier {
                pred,
                target,
                eps: e,
            },
            needs,
        ))
    }

    /// Zero-filled leaf with the same shape as `v` (no gradient).
    pub fn zeros_like(&mut self, v: Var) -> Var {
        let d = self.nodes[v.0].value.dim();
        self.input(Array4::zeros(d))
    }

    // ----------------------------------------------------------- backward

    /// Accumulate `delta` into the gradient slot of `v` if it needs one.
    fn accumulate(
        grads: &mut [Option<Array4<T>>],
        nodes: &[Node<T>],
        v: Var,
        delta: Array4<T>,
    ) {
        if !nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    /// Run reverse-mode accumulation from `root` (seeded with ones).
    /// Gradients of leaves created with [`Tape::param`] are then available
    /// through [`Tape::grad`].
    pub fn backward(&mut self, root: Var) {
        let seed = Array4::from_elem(self.nodes[root.0].value.dim(), T::one());
        self.grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad || self.grads[i].is_none() {
                continue;
            }
            let (gl, gr) = self.grads.split_at_mut(i);
            let g = gr[0].as_ref().unwrap();
            let nodes = &self.nodes;
            match &nodes[i].op {
                Op::Leaf => {}
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    pad,
                    groups,
                } => {
                    let (din, dw, db) = conv::conv2d_backward(
                        &nodes[input.0].value,
                        &nodes[weight.0].value,
                        g,
                        *pad,
                        *groups,
                        nodes[input.0].needs_grad,
                        nodes[weight.0].needs_grad,
                        bias.map(|b| nodes[b.0].needs_grad).unwrap_or(false),
                    );
                    if let Some(d) = din {
                        Self::accumulate(gl, nodes, *input, d);
                    }
                    if let Some(d) = dw {
                        Self::accumulate(gl, nodes, *weight, d);
                    }
                    if let (Some(d), Some(b)) = (db, bias) {
                        Self::accumulate(gl, nodes, *b, d);
                    }
                }
                Op::DeformConv {
                    input,
                    offsets,
                    masks,
                    weight,
                    bias,
                    pad,
                    groups,
                    deform_groups,
                    raw,
                } => {
                    let out = deform::deform_conv_backward(
                        &nodes[input.0].value,
                        &nodes[offsets.0].value,
                        &nodes[masks.0].value,
                        &nodes[weight.0].value,
                        raw,
                        g,
                        *pad,
                        *groups,
                        *deform_groups,
                        deform::GradRequest {
                            input: nodes[input.0].needs_grad,
                            offsets: nodes[offsets.0].needs_grad,
                            masks: nodes[masks.0].needs_grad,
                            weight: nodes[weight.0].needs_grad,
                            bias: bias.map(|b| nodes[b.0].needs_grad).unwrap_or(false),
                        },
                    );
                    if let Some(d) = out.input {
                        Self::accumulate(gl, nodes, *input, d);
                    }
                    if let Some(d) = out.offsets {
                        Self::accumulate(gl, nodes, *offsets, d);
                    }
                    if let Some(d) = out.masks {
                        Self::accumulate(gl, nodes, *masks, d);
                    }
                    if let Some(d) = out.weight {
                        Self::accumulate(gl, nodes, *weight, d);
                    }
                    if let (Some(d), Some(b)) = (out.bias, bias) {
                        Self::accumulate(gl, nodes, *b, d);
                    }
                }
                Op::Warp { src, flow } => {
                    let (dsrc, dflow) = warp::warp_backward(
                        &nodes[src.0].value,
                        &nodes[flow.0].value,
                        g,
                        nodes[src.0].needs_grad,
                        nodes[flow.0].needs_grad,
                    );
                    if let Some(d) = dsrc {
                        Self::accumulate(gl, nodes, *src, d);
                    }
                    if let Some(d) = dflow {
                        Self::accumulate(gl, nodes, *flow, d);
                    }
                }
                Op::LeakyRelu { input, slope } => {
                    let x = &nodes[input.0].value;
                    let s = *slope;
                    let mut d = g.clone();
                    d.zip_mut_with(x, |gv, &xv| {
                        if xv < T::zero() {
                            *gv = *gv * s;
                        }
                    });
                    Self::accumulate(gl, nodes, *input, d);
                }
                Op::Sigmoid { input } => {
                    let y = &nodes[i].value;
                    let one = T::one();
                    let mut d = g.clone();
                    d.zip_mut_with(y, |gv, &yv| *gv = *gv * yv * (one - yv));
                    Self::accumulate(gl, nodes, *input, d);
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    if nodes[a.0].needs_grad {
                        Self::accumulate(gl, nodes, a, g.clone());
                    }
                    if nodes[b.0].needs_grad {
                        Self::accumulate(gl, nodes, b, g.clone());
                    }
                }
                Op::Scale { input, factor } => {
                    let f = *factor;
                    let d = g.mapv(|v| v * f);
                    Self::accumulate(gl, nodes, *input, d);
                }
                Op::ConcatChannels { parts } => {
                    let mut at = 0;
                    let parts = parts.clone();
                    for p in parts {
                        let pc = nodes[p.0].value.dim().1;
                        if nodes[p.0].needs_grad {
                            let d = g.slice(ndarray::s![.., at..at + pc, .., ..]).to_owned();
                            Self::accumulate(gl, nodes, p, d);
                        }
                        at += pc;
                    }
                }
                Op::SliceChannels { input, start } => {
                    let (n, ci, h, w) = nodes[input.0].value.dim();
                    let len = nodes[i].value.dim().1;
                    let mut d = Array4::zeros((n, ci, h, w));
                    d.slice_mut(ndarray::s![.., *start..*start + len, .., ..])
                        .assign(g);
                    Self::accumulate(gl, nodes, *input, d);
                }
                Op::RepeatFlowTaps { flow, copies } => {
                    let (n, _, h, w) = nodes[flow.0].value.dim();
                    let mut d = Array4::zeros((n, 2, h, w));
                    for j in 0..*copies {
                        let gx = g.slice(ndarray::s![.., 2 * j, .., ..]);
                        let gy = g.slice(ndarray::s![.., 2 * j + 1, .., ..]);
                        let mut dx = d.slice_mut(ndarray::s![.., 0, .., ..]);
                        dx += &gx;
                        let mut dy = d.slice_mut(ndarray::s![.., 1, .., ..]);
                        dy += &gy;
                    }
                    Self::accumulate(gl, nodes, *flow, d);
                }
                Op::PixelShuffle { input, factor } => {
                    let d = resample::pixel_shuffle_backward(g, *factor);
                    Self::accumulate(gl, nodes, *input, d);
                }
                Op::BilinearUp { input, factor } => {
                    let (_, _, h, w) = nodes[input.0].value.dim();
                    let d = resample::bilinear_up_backward(g, *factor, h, w);
                    Self::accumulate(gl, nodes, *input, d);
                }
                Op::AvgPool2 { input } => {
                    let d = resample::avg_pool2_backward(g);
                    Self::accumulate(gl, nodes, *input, d);
                }
                Op::Clamp { input, lo, hi } => {
                    let x = &nodes[input.0].value;
                    let (lo, hi) = (*lo, *hi);
                    let mut d = g.clone();
                    d.zip_mut_with(x, |gv, &xv| {
                        if xv < lo || xv > hi {
                            *gv = T::zero();
                        }
                    });
                    Self::accumulate(gl, nodes, *input, d);
                }
                Op::Charbonnier { pred, target, eps } => {
                    let gs = g[[0, 0, 0, 0]];
                    let p = &nodes[pred.0].value;
                    let t = &nodes[target.0].value;
                    let e = *eps;
                    let inv_n = c::<T>(1.0 / p.len() as f64);
                    let mut d = p.clone();
                    d.zip_mut_with(t, |dv, &tv| {
                        let diff = *dv - tv;
                        *dv = gs * inv_n * diff / (diff * diff + e).sqrt();
                    });
                    if nodes[target.0].needs_grad {
                        let dt = d.mapv(|v| -v);
                        Self::accumulate(gl, nodes, *target, dt);
                    }
                    if nodes[pred.0].needs_grad {
                        Self::accumulate(gl, nodes, *pred, d);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn randn4(rng: &mut ChaCha8Rng, d: (usize, usize, usize, usize)) -> Array4<f64> {
        Array4::from_shape_simple_fn(d, || rng.random::<f64>() * 2.0 - 1.0)
    }

    /// Scalar-loop convolution used as the oracle for the GEMM path.
    fn conv_ref(
        input: &Array4<f64>,
        weight: &Array4<f64>,
        bias: Option<&Array4<f64>>,
        pad: usize,
        groups: usize,
    ) -> Array4<f64> {
        let (n, _ci, h, w) = input.dim();
        let (co, cig, k, _) = weight.dim();
        let (ho, wo) = (h + 2 * pad + 1 - k, w + 2 * pad + 1 - k);
        let cog = co / groups;
        let mut out = Array4::<f64>::zeros((n, co, ho, wo));
        for nn in 0..n {
            for oc in 0..co {
                let g = oc / cog;
                for y in 0..ho {
                    for x in 0..wo {
                        let mut acc = bias.map(|b| b[[0, oc, 0, 0]]).unwrap_or(0.0);
                        for icg in 0..cig {
                            let ic = g * cig + icg;
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = y as isize + ky as isize - pad as isize;
                                    let ix = x as isize + kx as isize - pad as isize;
                                    if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                        acc += input[[nn, ic, iy as usize, ix as usize]]
                                            * weight[[oc, icg, ky, kx]];
                                    }
                                }
                            }
                        }
                        out[[nn, oc, y, x]] = acc;
                    }
                }
            }
        }
        out
    }

    fn max_abs_diff(a: &Array4<f64>, b: &Array4<f64>) -> f64 {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn conv_matches_scalar_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(n, ci, co, h, w, k, pad, groups) in &[
            (1, 3, 4, 7, 6, 3, 1, 1),
            (2, 4, 6, 5, 5, 3, 1, 2),
            (1, 2, 2, 4, 9, 1, 0, 1),
            (2, 6, 3, 8, 4, 3, 1, 3),
            (1, 3, 5, 6, 6, 5, 2, 1),
            (1, 2, 3, 2, 2, 7, 3, 1),
        ] {
            let input = randn4(&mut rng, (n, ci, h, w));
            let weight = randn4(&mut rng, (co, ci / groups, k, k));
            let bias = randn4(&mut rng, (1, co, 1, 1));
            let got = conv::conv2d_forward(&input, &weight, Some(&bias), pad, groups);
            let want = conv_ref(&input, &weight, Some(&bias), pad, groups);
            assert!(
                max_abs_diff(&got, &want) < 1e-12,
                "conv mismatch at {:?}",
                (n, ci, co, h, w, k, pad, groups)
            );
        }
    }

    #[test]
    fn conv_backward_weight_matches_fd_spot() {
        // One coarse finite-difference probe; dense gradient checks live in
        // the integration suite.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let input = randn4(&mut rng, (1, 2, 5, 5));
        let mut weight = randn4(&mut rng, (3, 2, 3, 3));
        let loss = |w: &Array4<f64>| conv::conv2d_forward(&input, w, None, 1, 1).sum();
        let gout = Array4::<f64>::from_elem((1, 3, 5, 5), 1.0);
        let (_, dw, _) = conv::conv2d_backward(&input, &weight, &gout, 1, 1, false, true, false);
        let dw = dw.unwrap();
        let eps = 1e-6;
        for idx in [[0, 0, 0, 0], [2, 1, 2, 1], [1, 0, 1, 2]] {
            let orig = weight[idx];
            weight[idx] = orig + eps;
            let hi = loss(&weight);
            weight[idx] = orig - eps;
            let lo = loss(&weight);
            weight[idx] = orig;
            let fd = (hi - lo) / (2.0 * eps);
            assert!((fd - dw[idx]).abs() < 1e-6, "dw {idx:?}: fd={fd} an={}", dw[idx]);
        }
    }

    #[test]
    fn warp_zero_flow_is_bitwise_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut src = Array4::<f32>::from_shape_simple_fn((2, 3, 6, 7), || {
            rng.random::<f32>() * 4.0 - 2.0
        });
        src[[0, 0, 0, 0]] = -0.0;
        let flow = Array4::<f32>::zeros((2, 2, 6, 7));
        let out = warp::warp_forward(&src, &flow);
        for (a, b) in src.iter().zip(out.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn warp_half_pixel_hand_case() {
        let mut src = Array4::<f64>::zeros((1, 1, 2, 2));
        src[[0, 0, 0, 0]] = 1.0;
        src[[0, 0, 0, 1]] = 2.0;
        src[[0, 0, 1, 0]] = 3.0;
        src[[0, 0, 1, 1]] = 4.0;
        let mut flow = Array4::<f64>::zeros((1, 2, 2, 2));
        flow.slice_mut(ndarray::s![.., 0, .., ..]).fill(0.5);
        let out = warp::warp_forward(&src, &flow);
        // x + 0.5: interior blends, the right column reads half out of bounds.
        assert!((out[[0, 0, 0, 0]] - 1.5).abs() < 1e-12);
        assert!((out[[0, 0, 0, 1]] - 1.0).abs() < 1e-12);
        assert!((out[[0, 0, 1, 0]] - 3.5).abs() < 1e-12);
        assert!((out[[0, 0, 1, 1]] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn warp_scatter_is_adjoint_of_gather() {
        // <warp(src), g> must equal <src, warp^T(g)> for random tensors.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let src = randn4(&mut rng, (1, 2, 5, 6));
        let flow = randn4(&mut rng, (1, 2, 5, 6)).mapv(|v| v * 1.7);
        let g = randn4(&mut rng, (1, 2, 5, 6));
        let out = warp::warp_forward(&src, &flow);
        let (dsrc, _) = warp::warp_backward(&src, &flow, &g, true, false);
        let lhs: f64 = out.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
        let rhs: f64 = src.iter().zip(dsrc.unwrap().iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "lhs={lhs} rhs={rhs}");
    }

    #[test]
    fn pixel_shuffle_matches_layout_oracle() {
        let mut x = Array4::<f64>::zeros((1, 4, 1, 1));
        for c in 0..4 {
            x[[0, c, 0, 0]] = c as f64;
        }
        let y = resample::pixel_shuffle_forward(&x, 2);
        assert_eq!(y.dim(), (1, 1, 2, 2));
        assert_eq!(y[[0, 0, 0, 0]], 0.0);
        assert_eq!(y[[0, 0, 0, 1]], 1.0);
        assert_eq!(y[[0, 0, 1, 0]], 2.0);
        assert_eq!(y[[0, 0, 1, 1]], 3.0);
        let back = resample::pixel_shuffle_backward(&y, 2);
        assert_eq!(back, x);
    }

    #[test]
    fn bilinear_up_half_pixel_values() {
        let mut x = Array4::<f64>::zeros((1, 1, 1, 2));
        x[[0, 0, 0, 1]] = 1.0;
        let y = resample::bilinear_up_forward(&x, 2);
        let want = [0.0, 0.25, 0.75, 1.0];
        for (i, &v) in want.iter().enumerate() {
            assert!((y[[0, 0, 0, i]] - v).abs() < 1e-12, "at {i}");
        }
    }

    #[test]
    fn avg_pool_and_adjoint() {
        let mut x = Array4::<f64>::zeros((1, 1, 2, 2));
        x[[0, 0, 0, 0]] = 1.0;
        x[[0, 0, 1, 1]] = 3.0;
        let y = resample::avg_pool2_forward(&x);
        assert_eq!(y[[0, 0, 0, 0]], 1.0);
        let g = Array4::<f64>::from_elem((1, 1, 1, 1), 2.0);
        let d = resample::avg_pool2_backward(&g);
        assert!(d.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn tape_charbonnier_value_and_shape_checks() {
        let mut tape = Tape::<f64>::new();
        let p = tape.input(Array4::from_elem((1, 1, 1, 1), 3.0));
        let t = tape.input(Array4::from_elem((1, 1, 1, 1), 1.0));
        let l = tape.charbonnier(p, t, 1e-6).unwrap();
        assert!((tape.scalar(l) - (4.0f64 + 1e-6).sqrt()).abs() < 1e-12);
        let bad = tape.input(Array4::zeros((1, 2, 1, 1)));
        assert!(tape.charbonnier(p, bad, 1e-6).is_err());
    }

    #[test]
    fn tape_add_chain_backward_reaches_leaves() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(Array4::from_elem((1, 1, 2, 2), 1.0));
        let b = tape.param(Array4::from_elem((1, 1, 2, 2), 2.0));
        let s = tape.add(a, b).unwrap();
        let s2 = tape.scale(s, 3.0);
        let t = tape.input(Array4::zeros((1, 1, 2, 2)));
        let l = tape.charbonnier(s2, t, 1e-12).unwrap();
        tape.backward(l);
        // d/da mean |3(a+b)| with positive values: 3/4 per element.
        let ga = tape.grad(a).unwrap();
        assert!(ga.iter().all(|v| (v - 0.75).abs() < 1e-6));
        assert!(tape.grad(t).is_none());
    }

    #[test]
    fn repeat_flow_taps_layout() {
        let mut tape = Tape::<f64>::new();
        let mut f = Array4::<f64>::zeros((1, 2, 1, 1));
        f[[0, 0, 0, 0]] = 5.0;
        f[[0, 1, 0, 0]] = -3.0;
        let v = tape.input(f);
        let r = tape.repeat_flow_taps(v, 3).unwrap();
        let out = tape.value(r);
        assert_eq!(out.dim(), (1, 6, 1, 1));
        for j in 0..3 {
            assert_eq!(out[[0, 2 * j, 0, 0]], 5.0);
            assert_eq!(out[[0, 2 * j + 1, 0, 0]], -3.0);
        }
    }

    #[test]
    fn deform_mask_range_is_enforced() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Array4::zeros((1, 1, 4, 4)));
        let off = tape.input(Array4::zeros((1, 18, 4, 4)));
        let m = tape.input(Array4::from_elem((1, 9, 4, 4), 1.5));
        let w = tape.input(Array4::zeros((1, 1, 3, 3)));
        let err = tape.deform_conv(x, off, m, w, None, 1, 1, 1);
        assert!(matches!(err, Err(crate::Error::InvariantViolation(_))));
    }
}
