use alloc::vec::Vec;

use crate::error::{invalid, shape_err};
use crate::{Dims, Real, Result, Tensor4};

/// Source taps along one axis: `out[i] = (1-λ)·in[lo] + λ·in[hi]`.
#[derive(Clone, Copy)]
struct Tap<T> {
    lo: usize,
    hi: usize,
    frac: T,
}

/// Half-pixel-center sampling (align-corners off), clamped at the borders.
fn taps<T: Real>(in_len: usize, out_len: usize) -> Vec<Tap<T>> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            Tap { lo, hi, frac: T::of(src - lo as f64) }
        })
        .collect()
}

pub fn bilinear_resize<T: Real>(x: &Tensor4<T>, out_h: usize, out_w: usize) -> Result<Tensor4<T>> {
    if out_h == 0 || out_w == 0 {
        return Err(invalid!("resize target must be at least 1x1, got {out_h}x{out_w}"));
    }
    let d = x.dims();
    if d.h == out_h && d.w == out_w {
        return Ok(x.clone());
    }
    let ty = taps::<T>(d.h, out_h);
    let tx = taps::<T>(d.w, out_w);
    let od = d.with_hw(out_h, out_w);
    let mut out = Tensor4::zeros(od);
    // lerp form keeps constant regions exactly constant
    let lerp = |a: T, b: T, t: T| a + t * (b - a);
    for n in 0..d.n {
        for c in 0..d.c {
            let src = x.plane(n, c);
            let dst = out.plane_mut(n, c);
            for (oy, a) in ty.iter().enumerate() {
                let r0 = &src[a.lo * d.w..(a.lo + 1) * d.w];
                let r1 = &src[a.hi * d.w..(a.hi + 1) * d.w];
                for (ox, b) in tx.iter().enumerate() {
                    let top = lerp(r0[b.lo], r0[b.hi], b.frac);
                    let bot = lerp(r1[b.lo], r1[b.hi], b.frac);
                    dst[oy * out_w + ox] = lerp(top, bot, a.frac);
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`bilinear_resize`] for an input of extent `in_dims`.
pub fn bilinear_resize_backward<T: Real>(dy: &Tensor4<T>, in_dims: Dims) -> Result<Tensor4<T>> {
    let od = dy.dims();
    if od.n != in_dims.n || od.c != in_dims.c {
        return Err(shape_err!("resize grad {} incompatible with input {}", od, in_dims));
    }
    if od.h == in_dims.h && od.w == in_dims.w {
        return Ok(dy.clone());
    }
    let ty = taps::<T>(in_dims.h, od.h);
    let tx = taps::<T>(in_dims.w, od.w);
    let mut dx = Tensor4::zeros(in_dims);
    let one = T::one();
    let w = in_dims.w;
    for n in 0..od.n {
        for c in 0..od.c {
            let g = dy.plane(n, c);
            let dst = dx.plane_mut(n, c);
            for (oy, a) in ty.iter().enumerate() {
                for (ox, b) in tx.iter().enumerate() {
                    let v = g[oy * od.w + ox];
                    let top = v * (one - a.frac);
                    let bot = v * a.frac;
                    dst[a.lo * w + b.lo] += top * (one - b.frac);
                    dst[a.lo * w + b.hi] += top * b.frac;
                    dst[a.hi * w + b.lo] += bot * (one - b.frac);
                    dst[a.hi * w + b.hi] += bot * b.frac;
                }
            }
        }
    }
    Ok(dx)
}
