//! Coarse-to-fine pyramid optical flow (SPyNet-style) and backward
//! warping.
//!
//! Flow convention: channel 0 = dx, channel 1 = dy, in pixels, mapping
//! current-frame coordinates to source-frame coordinates. Each pyramid
//! level predicts a residual on top of the 2x-upsampled (and 2x-scaled)
//! coarser flow; the finest level runs at full input resolution. Final
//! prediction layers are zero-initialized, so a fresh net outputs
//! identically zero flow at every level.

use crate::autodiff::{warp as warp_kernel, Real, Var};
use crate::error::{Error, Result};
use crate::params::{register_conv, ConvIds, ParamGroup, ParamStore, Session};
use ndarray::{Array3, Array4, Axis};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Pyramid shape of the flow estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowPyramidConfig {
    pub n_levels: usize,
    pub base_channels: usize,
}

impl Default for FlowPyramidConfig {
    fn default() -> Self {
        FlowPyramidConfig {
            n_levels: 5,
            base_channels: 32,
        }
    }
}

impl FlowPyramidConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_levels == 0 {
            return Err(Error::ConfigError("n_levels must be >= 1".into()));
        }
        if self.base_channels < 2 || self.base_channels % 2 != 0 {
            return Err(Error::ConfigError(
                "base_channels must be an even integer >= 2".into(),
            ));
        }
        Ok(())
    }

    /// Input dims must be divisible by this for the session-path forward.
    pub fn divisor(&self) -> usize {
        1 << (self.n_levels - 1)
    }
}

/// Per-level refinement stacks, level 0 = finest.
#[derive(Debug, Clone)]
pub struct FlowNetIds {
    pub levels: Vec<[ConvIds; 5]>,
}

/// Register one refinement stack per level. Each stack sees
/// concat(ref, warped sup, flow) = 8 channels and emits a 2-channel flow
/// residual; the last conv is zero-initialized.
pub fn register_flow_net<T: Real>(
    store: &mut ParamStore<T>,
    cfg: &FlowPyramidConfig,
    prefix: &str,
    rng: &mut ChaCha8Rng,
) -> FlowNetIds {
    let bc = cfg.base_channels;
    let g = ParamGroup::Flow;
    let levels = (0..cfg.n_levels)
        .map(|l| {
            let n = |i: usize| format!("{prefix}.level{l}.conv{i}");
            [
                register_conv(store, &n(1), bc, 8, 7, g, false, rng),
                register_conv(store, &n(2), bc, bc, 3, g, false, rng),
                register_conv(store, &n(3), bc, bc, 3, g, false, rng),
                register_conv(store, &n(4), bc / 2, bc, 3, g, false, rng),
                register_conv(store, &n(5), 2, bc / 2, 3, g, true, rng),
            ]
        })
        .collect();
    FlowNetIds { levels }
}

fn refine<T: Real>(
    sess: &mut Session<T>,
    level: &[ConvIds; 5],
    reference: Var,
    supporting: Var,
    flow_in: Var,
) -> Result<Var> {
    let warped = sess.tape.warp(supporting, flow_in)?;
    let x = sess.tape.concat_channels(&[reference, warped, flow_in])?;
    let h = sess.conv_act(level[0], x, 3, 1)?;
    let h = sess.conv_act(level[1], h, 1, 1)?;
    let h = sess.conv_act(level[2], h, 1, 1)?;
    let h = sess.conv_act(level[3], h, 1, 1)?;
    let residual = sess.conv(level[4], h, 1, 1)?;
    sess.tape.add(flow_in, residual)
}

/// Session-path flow estimate for batched frame pairs (N, 3, H, W).
/// Requires H and W divisible by 2^(n_levels - 1); the array-level
/// [`estimate_flow`] wrapper pads and crops for arbitrary dims.
pub fn flow_forward<T: Real>(
    sess: &mut Session<T>,
    ids: &FlowNetIds,
    reference: Var,
    supporting: Var,
) -> Result<Var> {
    let (n, c, h, w) = sess.tape.shape(reference);
    let sup_shape = sess.tape.shape(supporting);
    if (n, c, h, w) != sup_shape {
        return Err(Error::ShapeMismatch(format!(
            "flow frame pair {:?} vs {:?}",
            (n, c, h, w),
            sup_shape
        )));
    }
    if c != 3 {
        return Err(Error::ShapeMismatch(format!(
            "flow expects 3-channel frames, got {c}"
        )));
    }
    let n_levels = ids.levels.len();
    let div = 1 << (n_levels - 1);
    if h % div != 0 || w % div != 0 {
        return Err(Error::ShapeMismatch(format!(
            "flow input {h}x{w} not divisible by {div}"
        )));
    }

    let mut refs = vec![reference];
    let mut sups = vec![supporting];
    for l in 1..n_levels {
        let r = sess.tape.avg_pool2(refs[l - 1])?;
        let s = sess.tape.avg_pool2(sups[l - 1])?;
        refs.push(r);
        sups.push(s);
    }

    let coarse_h = h / div;
    let coarse_w = w / div;
    let mut flow = sess
        .tape
        .input(Array4::<T>::zeros((n, 2, coarse_h, coarse_w)));
    for l in (0..n_levels).rev() {
        if l != n_levels - 1 {
            let up = sess.tape.bilinear_upsample(flow, 2);
            flow = sess.tape.scale(up, 2.0);
        }
        flow = refine(sess, &ids.levels[l], refs[l], sups[l], flow)?;
    }
    Ok(flow)
}

/// Replicate-pad a batch on the bottom/right edges to multiples of `div`.
pub(crate) fn pad_to_multiple<T: Real>(x: &Array4<T>, div: usize) -> Array4<T> {
    let (n, c, h, w) = x.dim();
    let ph = h.div_ceil(div) * div;
    let pw = w.div_ceil(div) * div;
    if ph == h && pw == w {
        return x.clone();
    }
    Array4::from_shape_fn((n, c, ph, pw), |(b, ch, y, xx)| {
        x[[b, ch, y.min(h - 1), xx.min(w - 1)]]
    })
}

/// Array-level flow estimate for a single frame pair (3, H, W) ->
/// (2, H, W). Pads to the pyramid divisor internally and crops back.
pub fn estimate_flow(
    reference: &Array3<f32>,
    supporting: &Array3<f32>,
    cfg: &FlowPyramidConfig,
    store: &ParamStore<f32>,
    ids: &FlowNetIds,
) -> Result<Array3<f32>> {
    cfg.validate()?;
    if reference.dim() != supporting.dim() {
        return Err(Error::ShapeMismatch(format!(
            "flow frame pair {:?} vs {:?}",
            reference.dim(),
            supporting.dim()
        )));
    }
    let (_, h, w) = reference.dim();
    let div = cfg.divisor();
    let ref_b = pad_to_multiple(&reference.clone().insert_axis(Axis(0)), div);
    let sup_b = pad_to_multiple(&supporting.clone().insert_axis(Axis(0)), div);

    let mut sess = Session::bind(store, false);
    let r = sess.tape.input(ref_b);
    let s = sess.tape.input(sup_b);
    let flow = flow_forward(&mut sess, ids, r, s)?;
    let full = sess.tape.value(flow);
    let cropped = full.slice(ndarray::s![0, .., ..h, ..w]).to_owned();
    if cropped.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalDivergence("non-finite flow".into()));
    }
    Ok(cropped)
}

/// Backward warp: out(p) = src(p + flow(p)) with bilinear sampling and
/// zero padding outside the source. Batched (N, C, H, W) against flow
/// (N, 2, H, W).
pub fn warp<T: Real>(src: &Array4<T>, flow: &Array4<T>) -> Result<Array4<T>> {
    let (n, _, h, w) = src.dim();
    let (fn_, fc, fh, fw) = flow.dim();
    if fc != 2 || (fn_, fh, fw) != (n, h, w) {
        return Err(Error::ShapeMismatch(format!(
            "warp src {:?} vs flow {:?}",
            src.dim(),
            flow.dim()
        )));
    }
    Ok(warp_kernel::warp_forward(src, flow))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::c;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};

    fn tiny_cfg() -> FlowPyramidConfig {
        FlowPyramidConfig {
            n_levels: 3,
            base_channels: 4,
        }
    }

    fn build(cfg: &FlowPyramidConfig, seed: u64) -> (ParamStore<f32>, FlowNetIds) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids = register_flow_net(&mut store, cfg, "flow", &mut rng);
        (store, ids)
    }

    fn rand_frame(seed: u64, h: usize, w: usize) -> Array3<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_simple_fn((3, h, w), || rng.random::<f32>())
    }

    #[test]
    fn fresh_net_outputs_exactly_zero_flow() {
        let cfg = tiny_cfg();
        let (store, ids) = build(&cfg, 7);
        let r = rand_frame(1, 8, 12);
        let s = rand_frame(2, 8, 12);
        let flow = estimate_flow(&r, &s, &cfg, &store, &ids).unwrap();
        assert_eq!(flow.dim(), (2, 8, 12));
        assert!(flow.iter().all(|&v| v == 0.0 && v.is_sign_positive()));
    }

    #[test]
    fn pad_and_crop_handles_non_divisible_dims() {
        let cfg = tiny_cfg();
        let (mut store, ids) = build(&cfg, 7);
        // Perturb one mid-stack weight so the output is nontrivial yet
        // still well-defined on the padded region.
        let wid = store.lookup("flow.level0.conv5.weight").unwrap();
        store
            .value_mut(wid)
            .iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v = 0.01 * ((i % 5) as f32 - 2.0));
        let r = rand_frame(3, 10, 14);
        let s = rand_frame(4, 10, 14);
        let flow = estimate_flow(&r, &s, &cfg, &store, &ids).unwrap();
        assert_eq!(flow.dim(), (2, 10, 14));
        assert!(flow.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn mismatched_frames_are_rejected() {
        let cfg = tiny_cfg();
        let (store, ids) = build(&cfg, 7);
        let r = rand_frame(1, 8, 8);
        let s = rand_frame(2, 8, 12);
        let err = estimate_flow(&r, &s, &cfg, &store, &ids).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch(_)));
    }

    #[test]
    fn session_path_rejects_non_divisible_dims() {
        let cfg = tiny_cfg();
        let (store, ids) = build(&cfg, 7);
        let mut sess = Session::bind(&store, false);
        let r = sess.tape.input(Array4::<f32>::zeros((1, 3, 10, 12)));
        let s = sess.tape.input(Array4::<f32>::zeros((1, 3, 10, 12)));
        let err = flow_forward(&mut sess, &ids, r, s).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch(_)));
    }

    #[test]
    fn warp_zero_flow_is_identity_and_oob_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let src = Array4::from_shape_simple_fn((2, 3, 5, 6), || rng.random::<f32>() - 0.5);
        let id = warp(&src, &Array4::zeros((2, 2, 5, 6))).unwrap();
        assert_eq!(id, src);
        let far = Array4::from_elem((2, 2, 5, 6), 100.0f32);
        let out = warp(&src, &far).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
        assert!(matches!(
            warp(&src, &Array4::zeros((2, 2, 5, 7))).unwrap_err(),
            Error::ShapeMismatch(_)
        ));
    }

    #[test]
    fn gradients_reach_flow_weights_once_head_is_live() {
        // Zero-init heads keep the net inert; nudge the finest head so the
        // loss actually depends on upstream weights, then check every
        // finest-level conv receives a finite, somewhere-nonzero gradient.
        let cfg = FlowPyramidConfig {
            n_levels: 2,
            base_channels: 4,
        };
        let (mut store, ids) = build(&cfg, 11);
        let wid = store.lookup("flow.level0.conv5.weight").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        store
            .value_mut(wid)
            .iter_mut()
            .for_each(|v| *v = c::<f32>(rng.random::<f64>() * 0.1 - 0.05));

        let mut sess = Session::bind(&store, true);
        let r = sess
            .tape
            .input(Array4::from_shape_simple_fn((1, 3, 8, 8), || {
                rng.random::<f32>()
            }));
        let s = sess
            .tape
            .input(Array4::from_shape_simple_fn((1, 3, 8, 8), || {
                rng.random::<f32>()
            }));
        let flow = flow_forward(&mut sess, &ids, r, s).unwrap();
        let target = sess.tape.input(Array4::from_elem((1, 2, 8, 8), 0.3f32));
        let loss = sess.tape.charbonnier(flow, target, 1e-6).unwrap();
        sess.tape.backward(loss);
        for i in 1..=5 {
            let w = store.lookup(&format!("flow.level0.conv{i}.weight")).unwrap();
            let v = sess.var(w);
            let g = sess.tape.grad(v).expect("gradient present");
            assert!(g.iter().all(|v| v.is_finite()));
            assert!(g.iter().any(|&v| v != 0.0), "conv{i} got a zero gradient");
        }
    }
}
