//! Resampling kernels: pixel shuffle, bilinear upsampling (half-pixel
//! centers, edge clamped) and 2x average pooling.

use super::{c, Real};
use ndarray::Array4;

/// Rearrange `(N, C*r^2, H, W)` into `(N, C, H*r, W*r)`. Input channel
/// `c*r^2 + dy*r + dx` lands at output pixel `(y*r + dy, x*r + dx)`.
pub fn pixel_shuffle_forward<T: Real>(input: &Array4<T>, r: usize) -> Array4<T> {
    let (n, ci, h, w) = input.dim();
    let co = ci / (r * r);
    let mut out = Array4::<T>::zeros((n, co, h * r, w * r));
    let os = out.as_slice_mut().unwrap();
    let is = input.as_slice().unwrap();
    let (hw_in, hw_out) = (h * w, h * r * w * r);
    for nn in 0..n {
        for cc in 0..co {
            for dy in 0..r {
                for dx in 0..r {
                    let src = &is[(nn * ci + cc * r * r + dy * r + dx) * hw_in..][..hw_in];
                    let obase = (nn * co + cc) * hw_out;
                    for y in 0..h {
                        let orow = obase + (y * r + dy) * (w * r) + dx;
                        let srow = y * w;
                        for x in 0..w {
                            os[orow + x * r] = src[srow + x];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`pixel_shuffle_forward`] (a pure permutation).
pub fn pixel_shuffle_backward<T: Real>(grad_out: &Array4<T>, r: usize) -> Array4<T> {
    let (n, co, hr, wr) = grad_out.dim();
    let (h, w) = (hr / r, wr / r);
    let ci = co * r * r;
    let mut din = Array4::<T>::zeros((n, ci, h, w));
    let ds = din.as_slice_mut().unwrap();
    let gs = grad_out.as_slice().unwrap();
    let (hw_in, hw_out) = (h * w, hr * wr);
    for nn in 0..n {
        for cc in 0..co {
            for dy in 0..r {
                for dx in 0..r {
                    let dst = &mut ds[(nn * ci + cc * r * r + dy * r + dx) * hw_in..][..hw_in];
                    let gbase = (nn * co + cc) * hw_out;
                    for y in 0..h {
                        let grow = gbase + (y * r + dy) * wr + dx;
                        let drow = y * w;
                        for x in 0..w {
                            dst[drow + x] = gs[grow + x * r];
                        }
                    }
                }
            }
        }
    }
    din
}

/// Per-axis interpolation table: output index -> (lo, hi, w_lo, w_hi).
/// Source coordinates use half-pixel centers (`align_corners = false`) and
/// clamp at the edges.
fn up_axis<T: Real>(len: usize, f: usize) -> Vec<(usize, usize, T, T)> {
    let out_len = len * f;
    let mut table = Vec::with_capacity(out_len);
    for o in 0..out_len {
        let u = ((o as f64 + 0.5) / f as f64 - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = (u.floor() as usize).min(len - 1);
        let fx = u - i0 as f64;
        let i1 = (i0 + 1).min(len - 1);
        if i1 == i0 {
            table.push((i0, i1, T::one(), T::zero()));
        } else {
            table.push((i0, i1, c::<T>(1.0 - fx), c::<T>(fx)));
        }
    }
    table
}

pub fn bilinear_up_forward<T: Real>(input: &Array4<T>, f: usize) -> Array4<T> {
    let (n, ch, h, w) = input.dim();
    if f == 1 {
        return input.clone();
    }
    let tx = up_axis::<T>(w, f);
    let ty = up_axis::<T>(h, f);
    let (hf, wf) = (h * f, w * f);
    let mut out = Array4::<T>::zeros((n, ch, hf, wf));
    let os = out.as_slice_mut().unwrap();
    let is = input.as_slice().unwrap();
    for nc in 0..n * ch {
        let src = &is[nc * h * w..][..h * w];
        let dst = &mut os[nc * hf * wf..][..hf * wf];
        for (yo, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            let r0 = &src[y0 * w..][..w];
            let r1 = &src[y1 * w..][..w];
            let drow = &mut dst[yo * wf..][..wf];
            for (xo, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let top = wx0 * r0[x0] + wx1 * r0[x1];
                let bot = wx0 * r1[x0] + wx1 * r1[x1];
                drow[xo] = wy0 * top + wy1 * bot;
            }
        }
    }
    out
}

pub fn bilinear_up_backward<T: Real>(grad_out: &Array4<T>, f: usize, h: usize, w: usize) -> Array4<T> {
    let (n, ch, hf, wf) = grad_out.dim();
    if f == 1 {
        return grad_out.clone();
    }
    let tx = up_axis::<T>(w, f);
    let ty = up_axis::<T>(h, f);
    let mut din = Array4::<T>::zeros((n, ch, h, w));
    let ds = din.as_slice_mut().unwrap();
    let gs = grad_out.as_slice().unwrap();
    for nc in 0..n * ch {
        let dst = &mut ds[nc * h * w..][..h * w];
        let src = &gs[nc * hf * wf..][..hf * wf];
        for (yo, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            let grow = &src[yo * wf..][..wf];
            for (xo, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let g = grow[xo];
                dst[y0 * w + x0] = dst[y0 * w + x0] + wy0 * wx0 * g;
                if x1 != x0 {
                    dst[y0 * w + x1] = dst[y0 * w + x1] + wy0 * wx1 * g;
                }
                if y1 != y0 {
                    dst[y1 * w + x0] = dst[y1 * w + x0] + wy1 * wx0 * g;
                    if x1 != x0 {
                        dst[y1 * w + x1] = dst[y1 * w + x1] + wy1 * wx1 * g;
                    }
                }
            }
        }
    }
    din
}

pub fn avg_pool2_forward<T: Real>(input: &Array4<T>) -> Array4<T> {
    let (n, ch, h, w) = input.dim();
    let (ho, wo) = (h / 2, w / 2);
    let quarter = c::<T>(0.25);
    let mut out = Array4::<T>::zeros((n, ch, ho, wo));
    let os = out.as_slice_mut().unwrap();
    let is = input.as_slice().unwrap();
    for nc in 0..n * ch {
        let src = &is[nc * h * w..][..h * w];
        let dst = &mut os[nc * ho * wo..][..ho * wo];
        for y in 0..ho {
            let r0 = &src[(2 * y) * w..][..w];
            let r1 = &src[(2 * y + 1) * w..][..w];
            for x in 0..wo {
                dst[y * wo + x] =
                    (r0[2 * x] + r0[2 * x + 1] + r1[2 * x] + r1[2 * x + 1]) * quarter;
            }
        }
    }
    out
}

pub fn avg_pool2_backward<T: Real>(grad_out: &Array4<T>) -> Array4<T> {
    let (n, ch, ho, wo) = grad_out.dim();
    let (h, w) = (ho * 2, wo * 2);
    let quarter = c::<T>(0.25);
    let mut din = Array4::<T>::zeros((n, ch, h, w));
    let ds = din.as_slice_mut().unwrap();
    let gs = grad_out.as_slice().unwrap();
    for nc in 0..n * ch {
        let src = &gs[nc * ho * wo..][..ho * wo];
        let dst = &mut ds[nc * h * w..][..h * w];
        for y in 0..ho {
            for x in 0..wo {
                let g = src[y * wo + x] * quarter;
                dst[(2 * y) * w + 2 * x] = g;
                dst[(2 * y) * w + 2 * x + 1] = g;
                dst[(2 * y + 1) * w + 2 * x] = g;
                dst[(2 * y + 1) * w + 2 * x + 1] = g;
            }
        }
    }
    din
}
