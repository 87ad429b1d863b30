use alloc::vec::Vec;

use crate::error::shape_err;
use crate::{Dims, Real, Result, Tensor4};

/// Per-pixel class indices, row-major (n, h, w).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<u32>,
}

impl LabelMap {
    pub fn new(n: usize, h: usize, w: usize, data: Vec<u32>) -> Result<Self> {
        if data.len() != n * h * w {
            return Err(shape_err!("label map needs {} entries, got {}", n * h * w, data.len()));
        }
        Ok(LabelMap { n, h, w, data })
    }

    pub fn filled(n: usize, h: usize, w: usize, v: u32) -> Self {
        LabelMap { n, h, w, data: alloc::vec![v; n * h * w] }
    }

    pub fn image(&self, n: usize) -> &[u32] {
        &self.data[n * self.h * self.w..(n + 1) * self.h * self.w]
    }
}

pub fn relu<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(|v| v.max(T::zero()))
}

/// Gradient of ReLU given its output `y`.
pub fn relu_backward<T: Real>(y: &Tensor4<T>, dy: &Tensor4<T>) -> Tensor4<T> {
    let mut dx = dy.clone();
    for (g, &v) in dx.data_mut().iter_mut().zip(y.data()) {
        if v <= T::zero() {
            *g = T::zero();
        }
    }
    dx
}

pub fn add<T: Real>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    let mut out = a.clone();
    add_assign(&mut out, b)?;
    Ok(out)
}

pub fn add_assign<T: Real>(acc: &mut Tensor4<T>, b: &Tensor4<T>) -> Result<()> {
    if acc.dims() != b.dims() {
        return Err(shape_err!("cannot add {} and {}", acc.dims(), b.dims()));
    }
    for (x, &y) in acc.data_mut().iter_mut().zip(b.data()) {
        *x += y;
    }
    Ok(())
}

/// Per-pixel index of the largest channel; ties go to the lowest index.
pub fn argmax_channel<T: Real>(x: &Tensor4<T>) -> LabelMap {
    let d = x.dims();
    let p = d.plane();
    let mut data = alloc::vec![0u32; d.n * p];
    for n in 0..d.n {
        for i in 0..p {
            let mut best = x.data()[n * d.c * p + i];
            let mut arg = 0;
            for c in 1..d.c {
                let v = x.data()[(n * d.c + c) * p + i];
                if v > best {
                    best = v;
                    arg = c;
                }
            }
            data[n * p + i] = arg as u32;
        }
    }
    LabelMap { n: d.n, h: d.h, w: d.w, data }
}

/// Stacks tensors along the channel axis.
pub fn concat_channels<T: Real>(parts: &[&Tensor4<T>]) -> Result<Tensor4<T>> {
    let first = parts.first().ok_or_else(|| shape_err!("concat of zero tensors"))?.dims();
    let mut c = 0;
    for p in parts {
        let d = p.dims();
        if d.n != first.n || d.h != first.h || d.w != first.w {
            return Err(shape_err!("cannot concat {} with {}", first, d));
        }
        c += d.c;
    }
    let od = first.with_c(c);
    let mut data = Vec::with_capacity(od.len());
    for n in 0..od.n {
        for p in parts {
            let block = p.dims().c * od.plane();
            data.extend_from_slice(&p.data()[n * block..(n + 1) * block]);
        }
    }
    Tensor4::from_vec(od, data)
}

/// Inverse of [`concat_channels`]: splits a gradient into the given widths.
pub fn split_channels<T: Real>(x: &Tensor4<T>, widths: &[usize]) -> Result<Vec<Tensor4<T>>> {
    let d = x.dims();
    if widths.iter().sum::<usize>() != d.c {
        return Err(shape_err!("split widths do not sum to {} channels", d.c));
    }
    let mut out: Vec<Vec<T>> = widths.iter().map(|w| Vec::with_capacity(d.n * w * d.plane())).collect();
    for n in 0..d.n {
        let mut off = (n * d.c) * d.plane();
        for (buf, &w) in out.iter_mut().zip(widths) {
            buf.extend_from_slice(&x.data()[off..off + w * d.plane()]);
            off += w * d.plane();
        }
    }
    out.into_iter()
        .zip(widths)
        .map(|(buf, &w)| Tensor4::from_vec(Dims::new(d.n, w, d.h, d.w), buf))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_of_negatives_is_zero() {
        let x = Tensor4::full(Dims::new(1, 2, 2, 2), -0.5f64);
        assert!(relu(&x).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn add_zero_is_identity_and_mismatch_fails() {
        let x = Tensor4::full(Dims::new(1, 2, 2, 2), 1.25f64);
        assert_eq!(add(&x, &Tensor4::zeros(x.dims())).unwrap(), x);
        assert!(add(&x, &Tensor4::zeros(Dims::new(1, 2, 2, 3))).is_err());
    }

    #[test]
    fn argmax_breaks_ties_low() {
        let x = Tensor4::from_vec(Dims::new(1, 3, 1, 2), alloc::vec![1.0f64, 0.0, 1.0, 2.0, 0.5, 2.0]).unwrap();
        assert_eq!(argmax_channel(&x).data, alloc::vec![0, 1]);
        let z = Tensor4::<f64>::zeros(Dims::new(1, 4, 2, 2));
        assert!(argmax_channel(&z).data.iter().all(|&l| l == 0));
    }

    #[test]
    fn concat_then_split_round_trips() {
        let a = Tensor4::from_vec(Dims::new(2, 1, 1, 2), alloc::vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor4::from_vec(Dims::new(2, 2, 1, 2), alloc::vec![5.0f64, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.data(), &[1.0, 2.0, 5.0, 6.0, 7.0, 8.0, 3.0, 4.0, 9.0, 10.0, 11.0, 12.0]);
        let parts = split_channels(&c, &[1, 2]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }
}
