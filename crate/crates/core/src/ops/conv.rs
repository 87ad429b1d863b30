use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, shape_err};
use crate::{Dims, GemmDims, Real, Result, Strided, StridedMut, Tensor4};

/// Square convolution: weight `c_out × c_in × k × k`, one bias per output
/// channel, zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel<T> {
    pub weight: Tensor4<T>,
    pub bias: Vec<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Real> ConvKernel<T> {
    pub fn new(weight: Tensor4<T>, bias: Vec<T>, stride: usize, padding: usize) -> Result<Self> {
        let d = weight.dims();
        if d.h != d.w {
            return Err(invalid!("kernel must be square, got {}x{}", d.h, d.w));
        }
        if bias.len() != d.n {
            return Err(shape_err!("bias length {} != c_out {}", bias.len(), d.n));
        }
        if stride == 0 {
            return Err(invalid!("stride must be positive"));
        }
        Ok(ConvKernel { weight, bias, stride, padding })
    }

    /// All-zero kernel of the given geometry.
    pub fn zeros(c_out: usize, c_in: usize, k: usize, stride: usize, padding: usize) -> Self {
        ConvKernel {
            weight: Tensor4::zeros(Dims::new(c_out, c_in, k, k)),
            bias: vec![T::zero(); c_out],
            stride,
            padding,
        }
    }

    /// 1×1 kernel mapping channel i to channel i.
    pub fn identity_1x1(channels: usize) -> Self {
        let mut k = Self::zeros(channels, channels, 1, 1, 0);
        for c in 0..channels {
            k.weight.data_mut()[c * channels + c] = T::one();
        }
        k
    }

    pub fn c_out(&self) -> usize {
        self.weight.dims().n
    }

    pub fn c_in(&self) -> usize {
        self.weight.dims().c
    }

    pub fn k(&self) -> usize {
        self.weight.dims().h
    }

    pub fn param_count(&self) -> usize {
        self.weight.dims().len() + self.bias.len()
    }

    pub fn out_dims(&self, x: Dims) -> Result<Dims> {
        if x.c != self.c_in() {
            return Err(shape_err!("conv expects {} input channels, got {x}", self.c_in()));
        }
        let h = conv_out_len(x.h, self.k(), self.stride, self.padding)?;
        let w = conv_out_len(x.w, self.k(), self.stride, self.padding)?;
        Ok(Dims::new(x.n, self.c_out(), h, w))
    }

    pub fn cast<U: Real>(&self) -> ConvKernel<U> {
        ConvKernel {
            weight: self.weight.cast(),
            bias: self.bias.iter().map(|b| U::of(b.as_f64())).collect(),
            stride: self.stride,
            padding: self.padding,
        }
    }

    /// Weight of output channel `o` as a flat `c_in·k·k` row.
    pub fn row(&self, o: usize) -> &[T] {
        let len = self.c_in() * self.k() * self.k();
        &self.weight.data()[o * len..(o + 1) * len]
    }
}

pub fn conv_out_len(len: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = len + 2 * pad;
    if padded < k {
        return Err(shape_err!("kernel {k} larger than padded extent {padded}"));
    }
    Ok((padded - k) / stride + 1)
}

/// Unrolls one image (c, h, w) into a `(c·k·k) × (oh·ow)` column matrix.
pub fn im2col<T: Real>(img: &[T], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, oh: usize, ow: usize) -> Vec<T> {
    let cols = oh * ow;
    let mut out = vec![T::zero(); c * k * k * cols];
    for ci in 0..c {
        let plane = &img[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: accumulates columns back into an image.
pub fn col2im<T: Real>(cols_buf: &[T], img: &mut [T], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, oh: usize, ow: usize) {
    let cols = oh * ow;
    for ci in 0..c {
        let plane = &mut img[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols_buf[row * cols..(row + 1) * cols];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn is_pointwise<T: Real>(k: &ConvKernel<T>) -> bool {
    k.k() == 1 && k.stride == 1 && k.padding == 0
}

/// Convolution through im2col and a matrix multiply.
pub fn conv2d<T: Real>(x: &Tensor4<T>, k: &ConvKernel<T>) -> Result<Tensor4<T>> {
    let xd = x.dims();
    let od = k.out_dims(xd)?;
    let (c_out, kk) = (k.c_out(), k.k());
    let rows = xd.c * kk * kk;
    let cols = od.plane();
    let mut out = Tensor4::zeros(od);
    for n in 0..xd.n {
        let img = &x.data()[n * xd.c * xd.plane()..(n + 1) * xd.c * xd.plane()];
        let unrolled;
        let colmat: &[T] = if is_pointwise(k) {
            img
        } else {
            unrolled = im2col(img, xd.c, xd.h, xd.w, kk, k.stride, k.padding, od.h, od.w);
            &unrolled
        };
        let dst = &mut out.data_mut()[n * c_out * cols..(n + 1) * c_out * cols];
        for (o, plane) in dst.chunks_mut(cols).enumerate() {
            plane.fill(k.bias[o]);
        }
        T::gemm(
            GemmDims { m: c_out, k: rows, n: cols },
            T::one(),
            Strided { data: k.weight.data(), rs: rows, cs: 1 },
            Strided { data: colmat, rs: cols, cs: 1 },
            T::one(),
            StridedMut { data: dst, rs: cols, cs: 1 },
        );
    }
    Ok(out)
}

/// Straight nested-loop convolution, accumulated in f64. Slow; used to check
/// [`conv2d`].
pub fn conv2d_direct<T: Real>(x: &Tensor4<T>, k: &ConvKernel<T>) -> Result<Tensor4<T>> {
    let xd = x.dims();
    let od = k.out_dims(xd)?;
    let kk = k.k();
    let mut out = Tensor4::zeros(od);
    for n in 0..od.n {
        for o in 0..od.c {
            for oy in 0..od.h {
                for ox in 0..od.w {
                    let mut acc = k.bias[o].as_f64();
                    for i in 0..xd.c {
                        for ky in 0..kk {
                            for kx in 0..kk {
                                let iy = (oy * k.stride + ky) as isize - k.padding as isize;
                                let ix = (ox * k.stride + kx) as isize - k.padding as isize;
                                if iy < 0 || ix < 0 || iy >= xd.h as isize || ix >= xd.w as isize {
                                    continue;
                                }
                                acc += k.weight.at(o, i, ky, kx).as_f64() * x.at(n, i, iy as usize, ix as usize).as_f64();
                            }
                        }
                    }
                    let idx = out.index(n, o, oy, ox);
                    out.data_mut()[idx] = T::of(acc);
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of a convolution with respect to its input and parameters.
#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub input: Tensor4<T>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

pub fn conv2d_backward<T: Real>(x: &Tensor4<T>, k: &ConvKernel<T>, dy: &Tensor4<T>) -> Result<ConvGrads<T>> {
    let xd = x.dims();
    let od = k.out_dims(xd)?;
    if dy.dims() != od {
        return Err(shape_err!("conv upstream grad {} != output {}", dy.dims(), od));
    }
    let (c_out, kk) = (k.c_out(), k.k());
    let rows = xd.c * kk * kk;
    let cols = od.plane();
    let mut dx = Tensor4::zeros(xd);
    let mut dw = vec![T::zero(); c_out * rows];
    let mut db = vec![T::zero(); c_out];
    let pointwise = is_pointwise(k);
    let mut dcols = vec![T::zero(); rows * cols];
    for n in 0..xd.n {
        let img = &x.data()[n * xd.c * xd.plane()..(n + 1) * xd.c * xd.plane()];
        let g = &dy.data()[n * c_out * cols..(n + 1) * c_out * cols];
        for (o, plane) in g.chunks(cols).enumerate() {
            db[o] += plane.iter().copied().sum::<T>();
        }
        let unrolled;
        let colmat: &[T] = if pointwise {
            img
        } else {
            unrolled = im2col(img, xd.c, xd.h, xd.w, kk, k.stride, k.padding, od.h, od.w);
            &unrolled
        };
        // dW += dY · colsᵀ
        T::gemm(
            GemmDims { m: c_out, k: cols, n: rows },
            T::one(),
            Strided { data: g, rs: cols, cs: 1 },
            Strided { data: colmat, rs: 1, cs: cols },
            T::one(),
            StridedMut { data: &mut dw, rs: rows, cs: 1 },
        );
        // dcols = Wᵀ · dY
        let dimg = &mut dx.data_mut()[n * xd.c * xd.plane()..(n + 1) * xd.c * xd.plane()];
        if pointwise {
            T::gemm(
                GemmDims { m: rows, k: c_out, n: cols },
                T::one(),
                Strided { data: k.weight.data(), rs: 1, cs: rows },
                Strided { data: g, rs: cols, cs: 1 },
                T::zero(),
                StridedMut { data: dimg, rs: cols, cs: 1 },
            );
        } else {
            T::gemm(
                GemmDims { m: rows, k: c_out, n: cols },
                T::one(),
                Strided { data: k.weight.data(), rs: 1, cs: rows },
                Strided { data: g, rs: cols, cs: 1 },
                T::zero(),
                StridedMut { data: &mut dcols, rs: cols, cs: 1 },
            );
            col2im(&dcols, dimg, xd.c, xd.h, xd.w, kk, k.stride, k.padding, od.h, od.w);
        }
    }
    Ok(ConvGrads { input: dx, weight: dw, bias: db })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rel_err(a: &Tensor4<f64>, b: &Tensor4<f64>) -> f64 {
        a.max_abs_diff(b).unwrap() / b.max_abs().max(1e-300)
    }

    fn random_kernel(rng: &mut ChaCha8Rng, c_out: usize, c_in: usize, k: usize, stride: usize, pad: usize) -> ConvKernel<f64> {
        let w = Tensor4::randn(Dims::new(c_out, c_in, k, k), rng);
        let b = Tensor4::randn(Dims::new(1, c_out, 1, 1), rng).into_vec();
        ConvKernel::new(w, b, stride, pad).unwrap()
    }

    #[test]
    fn identity_1x1_passes_input_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor4::<f64>::randn(Dims::new(2, 3, 4, 5), &mut rng);
        let y = conv2d(&x, &ConvKernel::identity_1x1(3)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn all_ones_3x3_sums_constant_field() {
        let x = Tensor4::full(Dims::new(1, 1, 5, 6), 2.5f64);
        let mut k = ConvKernel::<f64>::zeros(1, 1, 3, 1, 1);
        k.weight.data_mut().fill(1.0);
        let y = conv2d(&x, &k).unwrap();
        for yy in 1..4 {
            for xx in 1..5 {
                assert_eq!(y.at(0, 0, yy, xx), 22.5);
            }
        }
        // corners see 4 cells, edges 6
        assert_eq!(y.at(0, 0, 0, 0), 10.0);
        assert_eq!(y.at(0, 0, 0, 2), 15.0);
    }

    #[test]
    fn im2col_matches_direct_loop_on_fixed_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor4::<f64>::randn(Dims::new(1, 2, 5, 5), &mut rng);
        let k = random_kernel(&mut rng, 3, 2, 3, 1, 1);
        let fast = conv2d(&x, &k).unwrap();
        let slow = conv2d_direct(&x, &k).unwrap();
        assert_eq!(fast.dims(), Dims::new(1, 3, 5, 5));
        assert!(rel_err(&fast, &slow) <= 1e-12);
    }

    #[test]
    fn rejects_channel_mismatch_and_empty_output() {
        let x = Tensor4::<f64>::zeros(Dims::new(1, 2, 2, 2));
        let k = ConvKernel::<f64>::zeros(1, 3, 3, 1, 1);
        assert!(matches!(conv2d(&x, &k), Err(crate::Error::Shape(_))));
        let k = ConvKernel::<f64>::zeros(1, 2, 3, 1, 0);
        assert!(matches!(conv2d(&x, &k), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <im2col(x), c> == <x, col2im(c)>
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (c, h, w, k, s, p) = (2, 5, 4, 3, 2, 1);
        let oh = conv_out_len(h, k, s, p).unwrap();
        let ow = conv_out_len(w, k, s, p).unwrap();
        let x = Tensor4::<f64>::randn(Dims::new(1, c, h, w), &mut rng);
        let cm = Tensor4::<f64>::randn(Dims::new(1, c * k * k, oh, ow), &mut rng);
        let lhs: f64 = im2col(x.data(), c, h, w, k, s, p, oh, ow).iter().zip(cm.data()).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; c * h * w];
        col2im(cm.data(), &mut back, c, h, w, k, s, p, oh, ow);
        let rhs: f64 = back.iter().zip(x.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0));
    }
}
