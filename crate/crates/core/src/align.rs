//! Modulated deformable convolution with a brute-force oracle,
//! flow-guided deformable alignment, and the stage-3 re-align module.
//!
//! Offset layout for deformable group `g` and tap `t = ky*K + kx`:
//! channel `(g*K*K + t)*2` holds dx and `+1` holds dy; the matching mask
//! sits at channel `g*K*K + t`. Sampling uses the same zero-padded
//! bilinear contract as [`crate::flow::warp`].

use crate::autodiff::{deform, Real, Var};
use crate::error::{Error, Result};
use crate::params::{register_conv, ConvIds, ParamGroup, ParamStore, Session};
use ndarray::Array4;
use rand_chacha::ChaCha8Rng;

/// Per-pixel, per-tap displacements and modulation masks, batched.
#[derive(Debug, Clone)]
pub struct AlignmentParams<T: Real> {
    /// (N, 2*K*K*G, H, W)
    pub offsets: Array4<T>,
    /// (N, K*K*G, H, W), values in [0, 1]
    pub masks: Array4<T>,
}

/// Weights of one deformable convolution.
#[derive(Debug, Clone)]
pub struct DeformKernel<T: Real> {
    /// (Co, Ci/groups, K, K), K odd
    pub weights: Array4<T>,
    /// (1, Co, 1, 1)
    pub bias: Option<Array4<T>>,
    pub groups: usize,
    pub deformable_groups: usize,
}

impl<T: Real> DeformKernel<T> {
    pub fn kernel_size(&self) -> usize {
        self.weights.dim().3
    }
}

fn validate_deform<T: Real>(
    input: &Array4<T>,
    params: &AlignmentParams<T>,
    kernel: &DeformKernel<T>,
) -> Result<usize> {
    let (n, ci, h, w) = input.dim();
    let (co, cig, kh, kw) = kernel.weights.dim();
    if kh != kw || kh % 2 == 0 {
        return Err(Error::ShapeMismatch(format!(
            "deform kernel must be odd square, got {kh}x{kw}"
        )));
    }
    let (g, dg) = (kernel.groups, kernel.deformable_groups);
    if g == 0 || dg == 0 || ci % g != 0 || co % g != 0 || cig != ci / g || ci % dg != 0 {
        return Err(Error::ShapeMismatch(format!(
            "deform group mismatch: ci={ci} co={co} cig={cig} groups={g} dgroups={dg}"
        )));
    }
    let k2g = kh * kh * dg;
    if params.offsets.dim() != (n, 2 * k2g, h, w) {
        return Err(Error::ShapeMismatch(format!(
            "offsets {:?}, expected ({n},{},{h},{w})",
            params.offsets.dim(),
            2 * k2g
        )));
    }
    if params.masks.dim() != (n, k2g, h, w) {
        return Err(Error::ShapeMismatch(format!(
            "masks {:?}, expected ({n},{k2g},{h},{w})",
            params.masks.dim()
        )));
    }
    if let Some(b) = &kernel.bias {
        if b.dim() != (1, co, 1, 1) {
            return Err(Error::ShapeMismatch(format!(
                "bias {:?}, expected (1,{co},1,1)",
                b.dim()
            )));
        }
    }
    if params.offsets.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvariantViolation("non-finite offsets".into()));
    }
    let (lo, hi) = (T::zero(), T::one());
    if params.masks.iter().any(|&m| !(m >= lo && m <= hi)) {
        return Err(Error::InvariantViolation("mask outside [0, 1]".into()));
    }
    Ok(kh / 2)
}

/// Modulated deformable convolution (array level, same-size output).
pub fn deform_conv<T: Real>(
    input: &Array4<T>,
    params: &AlignmentParams<T>,
    kernel: &DeformKernel<T>,
) -> Result<Array4<T>> {
    let pad = validate_deform(input, params, kernel)?;
    let (out, _) = deform::deform_conv_forward(
        input,
        &params.offsets,
        &params.masks,
        &kernel.weights,
        kernel.bias.as_ref(),
        pad,
        kernel.groups,
        kernel.deformable_groups,
    );
    Ok(out)
}

/// Reference implementation: explicit per-pixel, per-tap scalar loops with
/// a plain four-corner bilinear read. Intended for small inputs only.
pub fn deform_conv_oracle<T: Real>(
    input: &Array4<T>,
    params: &AlignmentParams<T>,
    kernel: &DeformKernel<T>,
) -> Result<Array4<T>> {
    let pad = validate_deform(input, params, kernel)?;
    let (n, ci, h, w) = input.dim();
    let (co, cig, k, _) = kernel.weights.dim();
    let cog = co / kernel.groups;
    let cpd = ci / kernel.deformable_groups;
    let k2 = k * k;
    let pad = pad as isize;

    let bilinear = |b: usize, ch: usize, ys: T, xs: T| -> T {
        let yf = ys.floor();
        let xf = xs.floor();
        let fy = ys - yf;
        let fx = xs - xf;
        let (y0, x0) = (
            yf.to_f64().unwrap() as isize,
            xf.to_f64().unwrap() as isize,
        );
        let one = T::one();
        let mut acc = T::zero();
        for (dy, dx, wgt) in [
            (0, 0, (one - fy) * (one - fx)),
            (0, 1, (one - fy) * fx),
            (1, 0, fy * (one - fx)),
            (1, 1, fy * fx),
        ] {
            let yy = y0 + dy;
            let xx = x0 + dx;
            if yy >= 0 && (yy as usize) < h && xx >= 0 && (xx as usize) < w {
                acc = acc + wgt * input[[b, ch, yy as usize, xx as usize]];
            }
        }
        acc
    };

    let mut out = Array4::<T>::zeros((n, co, h, w));
    for b in 0..n {
        for oc in 0..co {
            let g = oc / cog;
            for y in 0..h {
                for x in 0..w {
                    let mut acc = kernel
                        .bias
                        .as_ref()
                        .map(|bb| bb[[0, oc, 0, 0]])
                        .unwrap_or_else(T::zero);
                    for icg in 0..cig {
                        let ic = g * cig + icg;
                        let gd = ic / cpd;
                        for ky in 0..k {
                            for kx in 0..k {
                                let t = gd * k2 + ky * k + kx;
                                let dx = params.offsets[[b, 2 * t, y, x]];
                                let dy = params.offsets[[b, 2 * t + 1, y, x]];
                                let m = params.masks[[b, t, y, x]];
                                let ys = T::from_isize(y as isize + ky as isize - pad)
                                    .unwrap()
                                    + dy;
                                let xs = T::from_isize(x as isize + kx as isize - pad)
                                    .unwrap()
                                    + dx;
                                acc = acc
                                    + kernel.weights[[oc, icg, ky, kx]] * m * bilinear(b, ic, ys, xs);
                            }
                        }
                    }
                    out[[b, oc, y, x]] = acc;
                }
            }
        }
    }
    Ok(out)
}

/// Tape-side alignment parameters.
#[derive(Debug, Clone, Copy)]
pub struct VarParams {
    pub offsets: Var,
    pub masks: Var,
}

/// Flow-guided alignment layers: a two-conv offset/mask predictor plus the
/// deformable kernel itself. The predictor's last conv is zero-initialized
/// so alignment starts as flow-only warping.
#[derive(Debug, Clone, Copy)]
pub struct FgaIds {
    pub pred1: ConvIds,
    pub pred2: ConvIds,
    pub kernel: ConvIds,
}

pub const DEFORM_K: usize = 3;

pub fn register_fga<T: Real>(
    store: &mut ParamStore<T>,
    name: &str,
    ch: usize,
    deform_groups: usize,
    rng: &mut ChaCha8Rng,
) -> FgaIds {
    let g = ParamGroup::Main;
    let out_ch = 3 * DEFORM_K * DEFORM_K * deform_groups;
    FgaIds {
        pred1: register_conv(
            store,
            &format!("{name}.pred1"),
            ch,
            2 * ch + 2,
            3,
            g,
            false,
            rng,
        ),
        pred2: register_conv(store, &format!("{name}.pred2"), out_ch, ch, 3, g, true, rng),
        kernel: register_conv(store, &format!("{name}.kernel"), ch, ch, 3, g, false, rng),
    }
}

/// Align `neighbor` onto `current`: predict per-tap residuals on top of the
/// optical flow, then sample the neighbor with one modulated deformable
/// convolution. Returns the alignment parameters for downstream reuse.
pub fn flow_guided_align<T: Real>(
    sess: &mut Session<T>,
    ids: &FgaIds,
    neighbor: Var,
    current: Var,
    flow: Var,
    deform_groups: usize,
) -> Result<(Var, VarParams)> {
    let nd = sess.tape.shape(neighbor);
    if sess.tape.shape(current) != nd {
        return Err(Error::ShapeMismatch(format!(
            "flow_guided_align: neighbor {:?} vs current {:?}",
            nd,
            sess.tape.shape(current)
        )));
    }
    let k2g = DEFORM_K * DEFORM_K * deform_groups;
    let warped = sess.tape.warp(neighbor, flow)?;
    let x = sess.tape.concat_channels(&[warped, current, flow])?;
    let h = sess.conv_act(ids.pred1, x, 1, 1)?;
    let p = sess.conv(ids.pred2, h, 1, 1)?;
    let residual = sess.tape.slice_channels(p, 0, 2 * k2g)?;
    let logits = sess.tape.slice_channels(p, 2 * k2g, k2g)?;
    let flow_taps = sess.tape.repeat_flow_taps(flow, k2g)?;
    let offsets = sess.tape.add(flow_taps, residual)?;
    let masks = sess.tape.sigmoid(logits);
    let kw = sess.var(ids.kernel.w);
    let kb = sess.var(ids.kernel.b);
    let aligned = sess
        .tape
        .deform_conv(neighbor, offsets, masks, kw, Some(kb), 1, 1, deform_groups)?;
    Ok((aligned, VarParams { offsets, masks }))
}

/// Re-align layers: a three-conv residual predictor over the pre-aligned
/// feature, sharing one deformable kernel between the pre-alignment and the
/// final alignment so a zeroed residual branch reproduces the pre-alignment
/// exactly.
#[derive(Debug, Clone, Copy)]
pub struct RamIds {
    pub res1: ConvIds,
    pub res2: ConvIds,
    pub res3: ConvIds,
    pub kernel: ConvIds,
}

pub fn register_ram<T: Real>(
    store: &mut ParamStore<T>,
    name: &str,
    ch: usize,
    deform_groups: usize,
    rng: &mut ChaCha8Rng,
) -> RamIds {
    let g = ParamGroup::Main;
    let out_ch = 3 * DEFORM_K * DEFORM_K * deform_groups;
    RamIds {
        res1: register_conv(store, &format!("{name}.res1"), ch, 2 * ch, 3, g, false, rng),
        res2: register_conv(store, &format!("{name}.res2"), ch, ch, 3, g, false, rng),
        res3: register_conv(store, &format!("{name}.res3"), out_ch, ch, 3, g, true, rng),
        kernel: register_conv(store, &format!("{name}.kernel"), ch, ch, 3, g, false, rng),
    }
}

/// Stage-3 re-alignment: pre-align the neighbor with the stage-2
/// parameters, predict offset/mask residuals from concat(pre-aligned,
/// current), and run the final alignment at the summed parameters. Summed
/// masks are clamped back to [0, 1].
pub fn re_align<T: Real>(
    sess: &mut Session<T>,
    ids: &RamIds,
    f2_cur: Var,
    f2_nbr: Var,
    params2: &VarParams,
    deform_groups: usize,
) -> Result<(Var, VarParams)> {
    let nd = sess.tape.shape(f2_nbr);
    if sess.tape.shape(f2_cur) != nd {
        return Err(Error::ShapeMismatch(format!(
            "re_align: neighbor {:?} vs current {:?}",
            nd,
            sess.tape.shape(f2_cur)
        )));
    }
    let k2g = DEFORM_K * DEFORM_K * deform_groups;
    let kw = sess.var(ids.kernel.w);
    let kb = sess.var(ids.kernel.b);
    let pre = sess.tape.deform_conv(
        f2_nbr,
        params2.offsets,
        params2.masks,
        kw,
        Some(kb),
        1,
        1,
        deform_groups,
    )?;
    let x = sess.tape.concat_channels(&[pre, f2_cur])?;
    let h = sess.conv_act(ids.res1, x, 1, 1)?;
    let h = sess.conv_act(ids.res2, h, 1, 1)?;
    let p = sess.conv(ids.res3, h, 1, 1)?;
    let off_res = sess.tape.slice_channels(p, 0, 2 * k2g)?;
    let mask_res = sess.tape.slice_channels(p, 2 * k2g, k2g)?;
    let offsets = sess.tape.add(params2.offsets, off_res)?;
    let mask_sum = sess.tape.add(params2.masks, mask_res)?;
    let masks = sess.tape.clamp(mask_sum, 0.0, 1.0);
    let aligned = sess
        .tape
        .deform_conv(f2_nbr, offsets, masks, kw, Some(kb), 1, 1, deform_groups)?;
    Ok((aligned, VarParams { offsets, masks }))
}
