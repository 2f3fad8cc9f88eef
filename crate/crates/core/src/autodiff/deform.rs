//! Modulated deformable convolution. The forward pass samples the input at
//! kernel taps displaced by learned offsets, scales each sample by a
//! modulation mask, then applies the dense kernel via GEMM. The unmasked
//! sample matrix is returned so the backward pass can avoid resampling.
//!
//! Offset layout per deform group `g` and tap `t = ky*K + kx`:
//! channel `(g*K*K + t)*2` is the x displacement, `+1` the y displacement.
//! Mask layout: channel `g*K*K + t`.

use super::conv::{from_mat, grouped_matmul, to_mat};
use super::warp::{gather, gather_coord_grad, make_tap, scatter, Tap};
use super::{c, Real};
use ndarray::{s, Array2, Array4};

pub struct GradRequest {
    pub input: bool,
    pub offsets: bool,
    pub masks: bool,
    pub weight: bool,
    pub bias: bool,
}

pub struct DeformGrads<T: Real> {
    pub input: Option<Array4<T>>,
    pub offsets: Option<Array4<T>>,
    pub masks: Option<Array4<T>>,
    pub weight: Option<Array4<T>>,
    pub bias: Option<Array4<T>>,
}

struct Dims {
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    k: usize,
    k2: usize,
    ho: usize,
    wo: usize,
    howo: usize,
    cols: usize,
    dgroups: usize,
    cpg: usize,
}

fn dims<T: Real>(input: &Array4<T>, weight: &Array4<T>, pad: usize, dgroups: usize) -> Dims {
    let (n, ci, h, w) = input.dim();
    let k = weight.dim().2;
    let ho = h + 2 * pad + 1 - k;
    let wo = w + 2 * pad + 1 - k;
    Dims {
        n,
        ci,
        h,
        w,
        k,
        k2: k * k,
        ho,
        wo,
        howo: ho * wo,
        cols: n * ho * wo,
        dgroups,
        cpg: ci / dgroups,
    }
}

/// Fill `taps` with the sampling locations for batch `nn`, deform group
/// `gd`, tap `t`, reading the offset planes.
fn build_taps<T: Real>(taps: &mut Vec<Tap<T>>, offs: &[T], d: &Dims, nn: usize, gd: usize, t: usize, pad: usize) {
    let (ky, kx) = (t / d.k, t % d.k);
    let coff = 2 * d.k2 * d.dgroups;
    let base = (nn * coff + 2 * (gd * d.k2 + t)) * d.howo;
    let ox = &offs[base..base + d.howo];
    let oy = &offs[base + d.howo..base + 2 * d.howo];
    taps.clear();
    for y in 0..d.ho {
        for x in 0..d.wo {
            let p = y * d.wo + x;
            let xs = c::<T>((x + kx) as f64 - pad as f64) + ox[p];
            let ys = c::<T>((y + ky) as f64 - pad as f64) + oy[p];
            taps.push(make_tap(xs, ys, d.h, d.w));
        }
    }
}

/// Multiply each row of the sample matrix by its deform-group mask plane.
fn apply_masks<T: Real>(col: &mut Array2<T>, masks: &Array4<T>, d: &Dims) {
    let cm = d.k2 * d.dgroups;
    let ms = masks.as_slice().unwrap();
    let cs = col.as_slice_mut().unwrap();
    for row in 0..d.ci * d.k2 {
        let ci = row / d.k2;
        let t = row % d.k2;
        let gd = ci / d.cpg;
        for nn in 0..d.n {
            let m = &ms[(nn * cm + gd * d.k2 + t) * d.howo..][..d.howo];
            let dst = &mut cs[row * d.cols + nn * d.howo..][..d.howo];
            for (v, &mv) in dst.iter_mut().zip(m.iter()) {
                *v = *v * mv;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn deform_conv_forward<T: Real>(
    input: &Array4<T>,
    offsets: &Array4<T>,
    masks: &Array4<T>,
    weight: &Array4<T>,
    bias: Option<&Array4<T>>,
    pad: usize,
    groups: usize,
    dgroups: usize,
) -> (Array4<T>, Array2<T>) {
    let d = dims(input, weight, pad, dgroups);
    let (co, cig, _, _) = weight.dim();
    let is = input.as_slice().unwrap();
    let offs = offsets.as_slice().unwrap();
    let mut raw = Array2::<T>::zeros((d.ci * d.k2, d.cols));
    let mut taps: Vec<Tap<T>> = Vec::with_capacity(d.howo);
    {
        let rs = raw.as_slice_mut().unwrap();
        for nn in 0..d.n {
            for gd in 0..d.dgroups {
                for t in 0..d.k2 {
                    build_taps(&mut taps, offs, &d, nn, gd, t, pad);
                    for ci in gd * d.cpg..(gd + 1) * d.cpg {
                        let plane = &is[(nn * d.ci + ci) * d.h * d.w..][..d.h * d.w];
                        let rowbase = (ci * d.k2 + t) * d.cols + nn * d.howo;
                        for (p, tap) in taps.iter().enumerate() {
                            rs[rowbase + p] = gather(plane, d.h, d.w, tap);
                        }
                    }
                }
            }
        }
    }
    let mut col = raw.clone();
    apply_masks(&mut col, masks, &d);
    let wmat = weight
        .view()
        .into_shape_with_order((co, cig * d.k2))
        .unwrap()
        .to_owned();
    let out_mat = grouped_matmul(&wmat, &col, groups);
    (from_mat(&out_mat, d.n, d.ho, d.wo, bias), raw)
}

#[allow(clippy::too_many_arguments)]
pub fn deform_conv_backward<T: Real>(
    input: &Array4<T>,
    offsets: &Array4<T>,
    masks: &Array4<T>,
    weight: &Array4<T>,
    raw: &Array2<T>,
    grad_out: &Array4<T>,
    pad: usize,
    groups: usize,
    dgroups: usize,
    req: GradRequest,
) -> DeformGrads<T> {
    let d = dims(input, weight, pad, dgroups);
    let (co, cig, _, _) = weight.dim();
    let cog = co / groups;
    let rg = cig * d.k2;
    let gmat = to_mat(grad_out);

    let bias = if req.bias {
        let mut db = Array4::<T>::zeros((1, co, 1, 1));
        for cc in 0..co {
            let s: f64 = gmat
                .slice(s![cc, ..])
                .iter()
                .map(|v| v.to_f64().unwrap())
                .sum();
            db[[0, cc, 0, 0]] = c::<T>(s);
        }
        Some(db)
    } else {
        None
    };

    let weight_grad = if req.weight {
        let mut col = raw.clone();
        apply_masks(&mut col, masks, &d);
        let mut dwm = Array2::<T>::zeros((co, rg));
        for g in 0..groups {
            let gg = gmat.slice(s![g * cog..(g + 1) * cog, ..]);
            let cg = col.slice(s![g * rg..(g + 1) * rg, ..]);
            dwm.slice_mut(s![g * cog..(g + 1) * cog, ..])
                .assign(&gg.dot(&cg.t()));
        }
        Some(dwm.into_shape_with_order((co, cig, d.k, d.k)).unwrap())
    } else {
        None
    };

    if !(req.input || req.offsets || req.masks) {
        return DeformGrads {
            input: None,
            offsets: None,
            masks: None,
            weight: weight_grad,
            bias,
        };
    }

    // Gradient w.r.t. the masked sample matrix.
    let wmat = weight
        .view()
        .into_shape_with_order((co, rg))
        .unwrap()
        .to_owned();
    let mut dcol = Array2::<T>::zeros((d.ci * d.k2, d.cols));
    for g in 0..groups {
        let wg = wmat.slice(s![g * cog..(g + 1) * cog, ..]);
        let gg = gmat.slice(s![g * cog..(g + 1) * cog, ..]);
        dcol.slice_mut(s![g * rg..(g + 1) * rg, ..])
            .assign(&wg.t().dot(&gg));
    }

    let masks_grad = if req.masks {
        let cm = d.k2 * d.dgroups;
        let mut dm = Array4::<T>::zeros((d.n, cm, d.ho, d.wo));
        let dms = dm.as_slice_mut().unwrap();
        let dcs = dcol.as_slice().unwrap();
        let rs = raw.as_slice().unwrap();
        for row in 0..d.ci * d.k2 {
            let ci = row / d.k2;
            let t = row % d.k2;
            let gd = ci / d.cpg;
            for nn in 0..d.n {
                let dst = &mut dms[(nn * cm + gd * d.k2 + t) * d.howo..][..d.howo];
                let a = &dcs[row * d.cols + nn * d.howo..][..d.howo];
                let b = &rs[row * d.cols + nn * d.howo..][..d.howo];
                for ((o, &x), &y) in dst.iter_mut().zip(a.iter()).zip(b.iter()) {
                    *o = *o + x * y;
                }
            }
        }
        Some(dm)
    } else {
        None
    };

    // Gradient w.r.t. the unmasked samples: scale dcol by the masks.
    apply_masks(&mut dcol, masks, &d);

    let mut input_grad = req.input.then(|| Array4::<T>::zeros(input.dim()));
    let mut offsets_grad = req.offsets.then(|| Array4::<T>::zeros(offsets.dim()));
    let is = input.as_slice().unwrap();
    let offs = offsets.as_slice().unwrap();
    let dcs = dcol.as_slice().unwrap();
    let coff = 2 * d.k2 * d.dgroups;
    let mut taps: Vec<Tap<T>> = Vec::with_capacity(d.howo);
    for nn in 0..d.n {
        for gd in 0..d.dgroups {
            for t in 0..d.k2 {
                build_taps(&mut taps, offs, &d, nn, gd, t, pad);
                for ci in gd * d.cpg..(gd + 1) * d.cpg {
                    let rowbase = (ci * d.k2 + t) * d.cols + nn * d.howo;
                    if let Some(di) = input_grad.as_mut() {
                        let ds = di.as_slice_mut().unwrap();
                        let plane = &mut ds[(nn * d.ci + ci) * d.h * d.w..][..d.h * d.w];
                        for (p, tap) in taps.iter().enumerate() {
                            scatter(plane, d.h, d.w, tap, dcs[rowbase + p]);
                        }
                    }
                    if let Some(doff) = offsets_grad.as_mut() {
                        let plane = &is[(nn * d.ci + ci) * d.h * d.w..][..d.h * d.w];
                        let ds = doff.as_slice_mut().unwrap();
                        let base = (nn * coff + 2 * (gd * d.k2 + t)) * d.howo;
                        for (p, tap) in taps.iter().enumerate() {
                            let g = dcs[rowbase + p];
                            if g == T::zero() {
                                continue;
                            }
                            let (gx, gy) = gather_coord_grad(plane, d.h, d.w, tap);
                            ds[base + p] = ds[base + p] + gx * g;
                            ds[base + d.howo + p] = ds[base + d.howo + p] + gy * g;
                        }
                    }
                }
            }
        }
    }

    DeformGrads {
        input: input_grad,
        offsets: offsets_grad,
        masks: masks_grad,
        weight: weight_grad,
        bias,
    }
}
