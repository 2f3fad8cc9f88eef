//! Bilinear sampling: backward warping by a dense flow field, plus the
//! gather/scatter/coordinate-gradient helpers shared with the deformable
//! convolution kernel. Out-of-bounds taps read as zero.

use super::{c, Real};
use ndarray::Array4;

/// One bilinear sampling location, split into an integer corner and
/// fractional weights.
#[derive(Clone, Copy)]
pub(crate) struct Tap<T: Real> {
    pub x0: isize,
    pub y0: isize,
    pub fx: T,
    pub fy: T,
}

/// Build a tap at continuous coordinates `(x, y)` on an `h` by `w` plane.
/// Coordinates are clamped into a band just outside the support so that
/// `floor` cannot overflow; everything in that band samples (and
/// back-propagates) exact zeros. Non-finite coordinates land there too.
#[inline]
pub(crate) fn make_tap<T: Real>(x: T, y: T, h: usize, w: usize) -> Tap<T> {
    let lo = c::<T>(-2.0);
    let xhi = c::<T>(w as f64 + 1.0);
    let yhi = c::<T>(h as f64 + 1.0);
    let xc = if x.is_finite() { x.max(lo).min(xhi) } else { lo };
    let yc = if y.is_finite() { y.max(lo).min(yhi) } else { lo };
    let xf = xc.floor();
    let yf = yc.floor();
    Tap {
        x0: xf.to_isize().unwrap(),
        y0: yf.to_isize().unwrap(),
        fx: xc - xf,
        fy: yc - yf,
    }
}

#[inline]
fn at<T: Real>(plane: &[T], h: usize, w: usize, y: isize, x: isize) -> T {
    if y >= 0 && y < h as isize && x >= 0 && x < w as isize {
        plane[y as usize * w + x as usize]
    } else {
        T::zero()
    }
}

/// Bilinear read. Integer-aligned in-bounds taps return the source value
/// bit-for-bit (no arithmetic is applied to it).
#[inline]
pub(crate) fn gather<T: Real>(plane: &[T], h: usize, w: usize, t: &Tap<T>) -> T {
    let zero = T::zero();
    let one = T::one();
    if t.fx == zero && t.fy == zero {
        return at(plane, h, w, t.y0, t.x0);
    }
    let (x1, y1) = (t.x0 + 1, t.y0 + 1);
    let mut acc = zero;
    let w00 = (one - t.fx) * (one - t.fy);
    let w10 = t.fx * (one - t.fy);
    let w01 = (one - t.fx) * t.fy;
    let w11 = t.fx * t.fy;
    if w00 != zero {
        acc = acc + w00 * at(plane, h, w, t.y0, t.x0);
    }
    if w10 != zero {
        acc = acc + w10 * at(plane, h, w, t.y0, x1);
    }
    if w01 != zero {
        acc = acc + w01 * at(plane, h, w, y1, t.x0);
    }
    if w11 != zero {
        acc = acc + w11 * at(plane, h, w, y1, x1);
    }
    acc
}

#[inline]
fn scatter_at<T: Real>(plane: &mut [T], h: usize, w: usize, y: isize, x: isize, v: T) {
    if y >= 0 && y < h as isize && x >= 0 && x < w as isize {
        let i = y as usize * w + x as usize;
        plane[i] = plane[i] + v;
    }
}

/// Adjoint of [`gather`]: distribute `g` onto the four corners.
#[inline]
pub(crate) fn scatter<T: Real>(plane: &mut [T], h: usize, w: usize, t: &Tap<T>, g: T) {
    let zero = T::zero();
    let one = T::one();
    let (x1, y1) = (t.x0 + 1, t.y0 + 1);
    let w00 = (one - t.fx) * (one - t.fy);
    let w10 = t.fx * (one - t.fy);
    let w01 = (one - t.fx) * t.fy;
    let w11 = t.fx * t.fy;
    if w00 != zero {
        scatter_at(plane, h, w, t.y0, t.x0, w00 * g);
    }
    if w10 != zero {
        scatter_at(plane, h, w, t.y0, x1, w10 * g);
    }
    if w01 != zero {
        scatter_at(plane, h, w, y1, t.x0, w01 * g);
    }
    if w11 != zero {
        scatter_at(plane, h, w, y1, x1, w11 * g);
    }
}

/// Gradient of the gathered value with respect to the continuous sampling
/// coordinates, `(d/dx, d/dy)`.
#[inline]
pub(crate) fn gather_coord_grad<T: Real>(plane: &[T], h: usize, w: usize, t: &Tap<T>) -> (T, T) {
    let one = T::one();
    let (x1, y1) = (t.x0 + 1, t.y0 + 1);
    let v00 = at(plane, h, w, t.y0, t.x0);
    let v10 = at(plane, h, w, t.y0, x1);
    let v01 = at(plane, h, w, y1, t.x0);
    let v11 = at(plane, h, w, y1, x1);
    let gx = (one - t.fy) * (v10 - v00) + t.fy * (v11 - v01);
    let gy = (one - t.fx) * (v01 - v00) + t.fx * (v11 - v10);
    (gx, gy)
}

/// Backward-warp `src` by `flow`: `out(x, y) = src(x + dx, y + dy)` with
/// bilinear interpolation. `flow` has channel 0 = dx, channel 1 = dy.
pub fn warp_forward<T: Real>(src: &Array4<T>, flow: &Array4<T>) -> Array4<T> {
    let (n, ch, h, w) = src.dim();
    let hw = h * w;
    let mut out = Array4::<T>::zeros((n, ch, h, w));
    let os = out.as_slice_mut().unwrap();
    let ss = src.as_slice().unwrap();
    let fs = flow.as_slice().unwrap();
    let mut taps: Vec<Tap<T>> = Vec::with_capacity(hw);
    for nn in 0..n {
        let fx = &fs[(nn * 2) * hw..][..hw];
        let fy = &fs[(nn * 2 + 1) * hw..][..hw];
        taps.clear();
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let xs = c::<T>(x as f64) + fx[p];
                let ys = c::<T>(y as f64) + fy[p];
                taps.push(make_tap(xs, ys, h, w));
            }
        }
        for cc in 0..ch {
            let plane = &ss[(nn * ch + cc) * hw..][..hw];
            let oplane = &mut os[(nn * ch + cc) * hw..][..hw];
            for (o, t) in oplane.iter_mut().zip(taps.iter()) {
                *o = gather(plane, h, w, t);
            }
        }
    }
    out
}

pub fn warp_backward<T: Real>(
    src: &Array4<T>,
    flow: &Array4<T>,
    grad_out: &Array4<T>,
    need_dsrc: bool,
    need_dflow: bool,
) -> (Option<Array4<T>>, Option<Array4<T>>) {
    let (n, ch, h, w) = src.dim();
    let hw = h * w;
    let ss = src.as_slice().unwrap();
    let fs = flow.as_slice().unwrap();
    let gs = grad_out.as_slice().unwrap();
    let mut dsrc = need_dsrc.then(|| Array4::<T>::zeros((n, ch, h, w)));
    let mut dflow = need_dflow.then(|| Array4::<T>::zeros((n, 2, h, w)));
    let mut taps: Vec<Tap<T>> = Vec::with_capacity(hw);
    for nn in 0..n {
        let fx = &fs[(nn * 2) * hw..][..hw];
        let fy = &fs[(nn * 2 + 1) * hw..][..hw];
        taps.clear();
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let xs = c::<T>(x as f64) + fx[p];
                let ys = c::<T>(y as f64) + fy[p];
                taps.push(make_tap(xs, ys, h, w));
            }
        }
        for cc in 0..ch {
            let g = &gs[(nn * ch + cc) * hw..][..hw];
            if let Some(d) = dsrc.as_mut() {
                let ds = d.as_slice_mut().unwrap();
                let plane = &mut ds[(nn * ch + cc) * hw..][..hw];
                for (p, t) in taps.iter().enumerate() {
                    scatter(plane, h, w, t, g[p]);
                }
            }
            if let Some(d) = dflow.as_mut() {
                let plane = &ss[(nn * ch + cc) * hw..][..hw];
                let ds = d.as_slice_mut().unwrap();
                for (p, t) in taps.iter().enumerate() {
                    let (gx, gy) = gather_coord_grad(plane, h, w, t);
                    ds[(nn * 2) * hw + p] = ds[(nn * 2) * hw + p] + gx * g[p];
                    ds[(nn * 2 + 1) * hw + p] = ds[(nn * 2 + 1) * hw + p] + gy * g[p];
                }
            }
        }
    }
    (dsrc, dflow)
}
