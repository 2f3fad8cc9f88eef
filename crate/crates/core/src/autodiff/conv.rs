//! Dense convolution kernels: im2col plus GEMM, stride 1, symmetric zero
//! padding, grouped channels.

use super::Real;
use ndarray::{s, Array2, Array4};

/// Unfold `input` into a `(Ci*K*K, N*Ho*Wo)` matrix. Column index is
/// `n*Ho*Wo + y*Wo + x`; row index is `(ci*K + ky)*K + kx`. Out-of-bounds
/// taps stay zero.
pub(crate) fn im2col<T: Real>(input: &Array4<T>, k: usize, pad: usize) -> Array2<T> {
    let (n, ci, h, w) = input.dim();
    let ho = h + 2 * pad + 1 - k;
    let wo = w + 2 * pad + 1 - k;
    let howo = ho * wo;
    let cols = n * howo;
    let mut col = Array2::<T>::zeros((ci * k * k, cols));
    let cs = col.as_slice_mut().unwrap();
    let is = input.as_slice().unwrap();
    for nn in 0..n {
        for cc in 0..ci {
            let plane = &is[(nn * ci + cc) * h * w..][..h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (cc * k + ky) * k + kx;
                    let rowbase = row * cols + nn * howo;
                    for y in 0..ho {
                        let iy = y as isize + ky as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let x_lo = pad.saturating_sub(kx);
                        let x_hi = (w + pad).saturating_sub(kx).min(wo);
                        if x_lo >= x_hi {
                            continue;
                        }
                        let src_base = iy as usize * w + (x_lo + kx - pad);
                        let dst = &mut cs[rowbase + y * wo + x_lo..rowbase + y * wo + x_hi];
                        dst.copy_from_slice(&plane[src_base..src_base + (x_hi - x_lo)]);
                    }
                }
            }
        }
    }
    col
}

/// Fold a `(Ci*K*K, N*Ho*Wo)` gradient matrix back onto the input layout,
/// accumulating overlapping taps.
pub(crate) fn col2im<T: Real>(
    dcol: &Array2<T>,
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
) -> Array4<T> {
    let ho = h + 2 * pad + 1 - k;
    let wo = w + 2 * pad + 1 - k;
    let howo = ho * wo;
    let cols = n * howo;
    let mut din = Array4::<T>::zeros((n, ci, h, w));
    let ds = din.as_slice_mut().unwrap();
    let cs = dcol.as_slice().unwrap();
    for nn in 0..n {
        for cc in 0..ci {
            let plane = &mut ds[(nn * ci + cc) * h * w..][..h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (cc * k + ky) * k + kx;
                    let rowbase = row * cols + nn * howo;
                    for y in 0..ho {
                        let iy = y as isize + ky as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let x_lo = pad.saturating_sub(kx);
                        let x_hi = (w + pad).saturating_sub(kx).min(wo);
                        if x_lo >= x_hi {
                            continue;
                        }
                        let src = &cs[rowbase + y * wo + x_lo..rowbase + y * wo + x_hi];
                        let dst_base = iy as usize * w + (x_lo + kx - pad);
                        for (i, &v) in src.iter().enumerate() {
                            plane[dst_base + i] = plane[dst_base + i] + v;
                        }
                    }
                }
            }
        }
    }
    din
}

/// Rearrange `(N, Co, Ho, Wo)` into the `(Co, N*Ho*Wo)` matrix layout used
/// by the GEMM calls.
pub(crate) fn to_mat<T: Real>(x: &Array4<T>) -> Array2<T> {
    let (n, co, ho, wo) = x.dim();
    let howo = ho * wo;
    let mut m = Array2::<T>::zeros((co, n * howo));
    let ms = m.as_slice_mut().unwrap();
    let xs = x.as_slice().unwrap();
    for nn in 0..n {
        for cc in 0..co {
            let src = &xs[(nn * co + cc) * howo..][..howo];
            let dst = &mut ms[cc * (n * howo) + nn * howo..][..howo];
            dst.copy_from_slice(src);
        }
    }
    m
}

/// Inverse of [`to_mat`], optionally adding a per-channel bias.
pub(crate) fn from_mat<T: Real>(
    m: &Array2<T>,
    n: usize,
    ho: usize,
    wo: usize,
    bias: Option<&Array4<T>>,
) -> Array4<T> {
    let co = m.dim().0;
    let howo = ho * wo;
    let mut out = Array4::<T>::zeros((n, co, ho, wo));
    let os = out.as_slice_mut().unwrap();
    let ms = m.as_slice().unwrap();
    for nn in 0..n {
        for cc in 0..co {
            let src = &ms[cc * (n * howo) + nn * howo..][..howo];
            let dst = &mut os[(nn * co + cc) * howo..][..howo];
            dst.copy_from_slice(src);
            if let Some(b) = bias {
                let bv = b[[0, cc, 0, 0]];
                for v in dst.iter_mut() {
                    *v = *v + bv;
                }
            }
        }
    }
    out
}

/// GEMM `weight_mat * col` with grouped channels, producing `(Co, N*Ho*Wo)`.
pub(crate) fn grouped_matmul<T: Real>(
    wmat: &Array2<T>,
    col: &Array2<T>,
    groups: usize,
) -> Array2<T> {
    let (co, _) = wmat.dim();
    let (rows, cols) = col.dim();
    let cog = co / groups;
    let rg = rows / groups;
    let mut out = Array2::<T>::zeros((co, cols));
    for g in 0..groups {
        let wg = wmat.slice(s![g * cog..(g + 1) * cog, ..]);
        let cg = col.slice(s![g * rg..(g + 1) * rg, ..]);
        out.slice_mut(s![g * cog..(g + 1) * cog, ..])
            .assign(&wg.dot(&cg));
    }
    out
}

pub fn conv2d_forward<T: Real>(
    input: &Array4<T>,
    weight: &Array4<T>,
    bias: Option<&Array4<T>>,
    pad: usize,
    groups: usize,
) -> Array4<T> {
    let (n, _, h, w) = input.dim();
    let (co, cig, k, _) = weight.dim();
    let ho = h + 2 * pad + 1 - k;
    let wo = w + 2 * pad + 1 - k;
    let col = im2col(input, k, pad);
    let wmat = weight
        .view()
        .into_shape_with_order((co, cig * k * k))
        .unwrap()
        .to_owned();
    let out_mat = grouped_matmul(&wmat, &col, groups);
    from_mat(&out_mat, n, ho, wo, bias)
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Real>(
    input: &Array4<T>,
    weight: &Array4<T>,
    grad_out: &Array4<T>,
    pad: usize,
    groups: usize,
    need_dinput: bool,
    need_dweight: bool,
    need_dbias: bool,
) -> (Option<Array4<T>>, Option<Array4<T>>, Option<Array4<T>>) {
    let (n, ci, h, w) = input.dim();
    let (co, cig, k, _) = weight.dim();
    let cog = co / groups;
    let rg = cig * k * k;
    let gmat = to_mat(grad_out);
    let cols = gmat.dim().1;

    let dbias = if need_dbias {
        let mut db = Array4::<T>::zeros((1, co, 1, 1));
        for cc in 0..co {
            // f64 accumulator keeps the reduction order-insensitive enough
            // for tight oracle comparisons.
            let s: f64 = gmat
                .slice(s![cc, ..])
                .iter()
                .map(|v| v.to_f64().unwrap())
                .sum();
            db[[0, cc, 0, 0]] = super::c::<T>(s);
        }
        Some(db)
    } else {
        None
    };

    let dweight = if need_dweight {
        let col = im2col(input, k, pad);
        let mut dwm = Array2::<T>::zeros((co, rg));
        for g in 0..groups {
            let gg = gmat.slice(s![g * cog..(g + 1) * cog, ..]);
            let cg = col.slice(s![g * rg..(g + 1) * rg, ..]);
            dwm.slice_mut(s![g * cog..(g + 1) * cog, ..])
                .assign(&gg.dot(&cg.t()));
        }
        Some(dwm.into_shape_with_order((co, cig, k, k)).unwrap())
    } else {
        None
    };

    let dinput = if need_dinput {
        let wmat = weight
            .view()
            .into_shape_with_order((co, rg))
            .unwrap()
            .to_owned();
        let mut dcol = Array2::<T>::zeros((ci * k * k, cols));
        for g in 0..groups {
            let wg = wmat.slice(s![g * cog..(g + 1) * cog, ..]);
            let gg = gmat.slice(s![g * cog..(g + 1) * cog, ..]);
            dcol.slice_mut(s![g * rg..(g + 1) * rg, ..])
                .assign(&wg.t().dot(&gg));
        }
        Some(col2im(&dcol, n, ci, h, w, k, pad))
    } else {
        None
    };

    (dinput, dweight, dbias)
}
