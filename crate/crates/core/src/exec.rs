//! One forward definition, several interpretations.
//!
//! Every composite (blocks, fusion, pooling, heads, the whole network) is
//! written once against [`Exec`]. [`Eager`] computes tensors directly,
//! [`crate::autograd::Tape`] records a graph for reverse mode, and
//! [`crate::cost::Counter`] propagates only shapes to count operations.

use alloc::vec::Vec;

use crate::blocks::ConvBn;
use crate::ops::{self, BatchNorm, BatchStats, ConvKernel, Mode};
use crate::{Dims, Real, Result, Tensor4};

/// Identity of a parameter-holding struct during one forward pass. Derived
/// from its address, so the owning network must not move while a key is live.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamKey(usize);

impl ParamKey {
    pub fn of<P>(p: &P) -> Self {
        ParamKey(p as *const P as usize)
    }
}

pub trait Exec<'a, T: Real> {
    type Value: Clone;

    fn dims(&self, v: &Self::Value) -> Dims;
    fn conv(&mut self, x: &Self::Value, k: &'a ConvKernel<T>) -> Result<Self::Value>;
    fn batch_norm(&mut self, x: &Self::Value, bn: &'a BatchNorm<T>) -> Result<Self::Value>;
    fn relu(&mut self, x: &Self::Value) -> Self::Value;
    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn resize(&mut self, x: &Self::Value, h: usize, w: usize) -> Result<Self::Value>;
    fn avg_pool(&mut self, x: &Self::Value, kernel: usize, stride: usize, pad: usize) -> Result<Self::Value>;
    fn global_avg_pool(&mut self, x: &Self::Value) -> Self::Value;
    fn concat(&mut self, parts: &[Self::Value]) -> Result<Self::Value>;

    fn conv_bn(&mut self, x: &Self::Value, cb: &'a ConvBn<T>) -> Result<Self::Value> {
        let y = self.conv(x, &cb.conv)?;
        match &cb.bn {
            Some(bn) => self.batch_norm(&y, bn),
            None => Ok(y),
        }
    }

    fn conv_bn_relu(&mut self, x: &Self::Value, cb: &'a ConvBn<T>) -> Result<Self::Value> {
        let y = self.conv_bn(x, cb)?;
        Ok(self.relu(&y))
    }
}

/// Direct tensor evaluation. In [`Mode::Train`] batch norm normalizes with
/// batch statistics and records them in `bn_stats` so the caller can fold
/// them into the running averages afterwards.
#[derive(Debug)]
pub struct Eager<T> {
    pub mode: Mode,
    pub bn_stats: Vec<(ParamKey, BatchStats<T>)>,
}

impl<T: Real> Eager<T> {
    pub fn new(mode: Mode) -> Self {
        Eager { mode, bn_stats: Vec::new() }
    }

    pub fn eval() -> Self {
        Self::new(Mode::Eval)
    }
}

/// Train-mode normalization without touching the running statistics.
pub(crate) fn batch_norm_batch<T: Real>(x: &Tensor4<T>, bn: &BatchNorm<T>) -> Result<(Tensor4<T>, BatchStats<T>)> {
    let mut scratch = bn.clone();
    ops::batch_norm_train(x, &mut scratch)
}

impl<'a, T: Real> Exec<'a, T> for Eager<T> {
    type Value = Tensor4<T>;

    fn dims(&self, v: &Tensor4<T>) -> Dims {
        v.dims()
    }

    fn conv(&mut self, x: &Tensor4<T>, k: &'a ConvKernel<T>) -> Result<Tensor4<T>> {
        ops::conv2d(x, k)
    }

    fn batch_norm(&mut self, x: &Tensor4<T>, bn: &'a BatchNorm<T>) -> Result<Tensor4<T>> {
        match self.mode {
            Mode::Eval => ops::batch_norm_eval(x, bn),
            Mode::Train => {
                let (y, stats) = batch_norm_batch(x, bn)?;
                self.bn_stats.push((ParamKey::of(bn), stats));
                Ok(y)
            }
        }
    }

    fn relu(&mut self, x: &Tensor4<T>) -> Tensor4<T> {
        ops::relu(x)
    }

    fn add(&mut self, a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
        ops::add(a, b)
    }

    fn resize(&mut self, x: &Tensor4<T>, h: usize, w: usize) -> Result<Tensor4<T>> {
        ops::bilinear_resize(x, h, w)
    }

    fn avg_pool(&mut self, x: &Tensor4<T>, kernel: usize, stride: usize, pad: usize) -> Result<Tensor4<T>> {
        ops::avg_pool(x, kernel, stride, pad)
    }

    fn global_avg_pool(&mut self, x: &Tensor4<T>) -> Tensor4<T> {
        ops::global_avg_pool(x)
    }

    fn concat(&mut self, parts: &[Tensor4<T>]) -> Result<Tensor4<T>> {
        let refs: Vec<&Tensor4<T>> = parts.iter().collect();
        ops::concat_channels(&refs)
    }
}
