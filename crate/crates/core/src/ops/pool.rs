use crate::error::invalid;
use crate::ops::conv_out_len;
use crate::{Dims, Real, Result, Tensor4};

/// Average pooling with zero padding; always divides by `kernel²`.
pub fn avg_pool<T: Real>(x: &Tensor4<T>, kernel: usize, stride: usize, pad: usize) -> Result<Tensor4<T>> {
    if kernel == 0 || stride == 0 {
        return Err(invalid!("pool kernel and stride must be positive"));
    }
    let d = x.dims();
    let od = d.with_hw(conv_out_len(d.h, kernel, stride, pad)?, conv_out_len(d.w, kernel, stride, pad)?);
    let inv = T::one() / T::of((kernel * kernel) as f64);
    let mut out = Tensor4::zeros(od);
    for n in 0..d.n {
        for c in 0..d.c {
            let src = x.plane(n, c);
            let dst = out.plane_mut(n, c);
            for oy in 0..od.h {
                let (y0, y1) = window(oy, kernel, stride, pad, d.h);
                for ox in 0..od.w {
                    let (x0, x1) = window(ox, kernel, stride, pad, d.w);
                    let mut s = T::zero();
                    for iy in y0..y1 {
                        for v in &src[iy * d.w + x0..iy * d.w + x1] {
                            s += *v;
                        }
                    }
                    dst[oy * od.w + ox] = s * inv;
                }
            }
        }
    }
    Ok(out)
}

/// In-bounds input range covered by output position `o`.
fn window(o: usize, kernel: usize, stride: usize, pad: usize, len: usize) -> (usize, usize) {
    let start = (o * stride) as isize - pad as isize;
    let lo = start.max(0) as usize;
    let hi = ((start + kernel as isize).max(0) as usize).min(len);
    (lo.min(hi), hi)
}

pub fn avg_pool_backward<T: Real>(dy: &Tensor4<T>, in_dims: Dims, kernel: usize, stride: usize, pad: usize) -> Result<Tensor4<T>> {
    let od = dy.dims();
    let inv = T::one() / T::of((kernel * kernel) as f64);
    let mut dx = Tensor4::zeros(in_dims);
    for n in 0..od.n {
        for c in 0..od.c {
            let g = dy.plane(n, c);
            let dst = dx.plane_mut(n, c);
            for oy in 0..od.h {
                let (y0, y1) = window(oy, kernel, stride, pad, in_dims.h);
                for ox in 0..od.w {
                    let (x0, x1) = window(ox, kernel, stride, pad, in_dims.w);
                    let v = g[oy * od.w + ox] * inv;
                    for iy in y0..y1 {
                        for d in &mut dst[iy * in_dims.w + x0..iy * in_dims.w + x1] {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
    Ok(dx)
}

/// Mean over each (h, w) plane, producing a 1×1 map.
pub fn global_avg_pool<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    let d = x.dims();
    let inv = T::one() / T::of(d.plane() as f64);
    let mut out = Tensor4::zeros(d.with_hw(1, 1));
    for n in 0..d.n {
        for c in 0..d.c {
            out.plane_mut(n, c)[0] = x.plane(n, c).iter().copied().sum::<T>() * inv;
        }
    }
    out
}

pub fn global_avg_pool_backward<T: Real>(dy: &Tensor4<T>, in_dims: Dims) -> Tensor4<T> {
    let inv = T::one() / T::of(in_dims.plane() as f64);
    let mut dx = Tensor4::zeros(in_dims);
    for n in 0..in_dims.n {
        for c in 0..in_dims.c {
            let v = dy.plane(n, c)[0] * inv;
            dx.plane_mut(n, c).fill(v);
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_mean() {
        let x = Tensor4::from_vec(Dims::new(1, 1, 2, 2), alloc::vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let y = avg_pool(&x, 2, 2, 0).unwrap();
        assert_eq!(y.dims(), Dims::new(1, 1, 1, 1));
        assert_eq!(y.data(), &[2.5]);
    }

    #[test]
    fn padding_counts_toward_divisor() {
        let x = Tensor4::full(Dims::new(1, 1, 3, 3), 1.0f64);
        let y = avg_pool(&x, 3, 1, 1).unwrap();
        assert_eq!(y.at(0, 0, 1, 1), 1.0);
        assert!((y.at(0, 0, 0, 0) - 4.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn large_kernel_on_tiny_map() {
        // the pyramid pooling branches hit this on the deepest features
        let x = Tensor4::full(Dims::new(1, 2, 1, 2), 3.0f64);
        let y = avg_pool(&x, 17, 8, 8).unwrap();
        assert_eq!(y.dims(), Dims::new(1, 2, 1, 1));
        assert!((y.at(0, 0, 0, 0) - 6.0 / 289.0).abs() < 1e-15);
    }

    #[test]
    fn global_pool_is_plane_mean() {
        let x = Tensor4::from_vec(Dims::new(1, 1, 2, 3), alloc::vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(global_avg_pool(&x).data(), &[3.5]);
    }
}
