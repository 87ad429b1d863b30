use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, shape_err};
use crate::{Real, Result, Tensor4};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch normalization parameters and running statistics.
///
/// `var` is the variance σ (not the standard deviation); normalization
/// divides by `sqrt(var + eps)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub eps: T,
    pub momentum: T,
}

impl<T: Real> BatchNorm<T> {
    /// γ=1, β=0, μ=0, σ=1.
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            eps: T::of(BN_EPS),
            momentum: T::of(BN_MOMENTUM),
        }
    }

    /// Stats under which eval-mode normalization is exactly the identity map.
    pub fn identity(channels: usize) -> Self {
        let mut bn = Self::new(channels);
        bn.var.fill(T::one() - bn.eps);
        bn
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        if self.beta.len() != c || self.mean.len() != c || self.var.len() != c {
            return Err(shape_err!("batch norm arrays have inconsistent lengths"));
        }
        if self.eps <= T::zero() {
            return Err(invalid!("batch norm eps must be positive"));
        }
        if self.var.iter().any(|v| *v < T::zero()) {
            return Err(invalid!("batch norm variance must be non-negative"));
        }
        Ok(())
    }

    /// Per-channel `(scale, shift)` such that eval-mode output is `scale·x + shift`.
    pub fn affine(&self) -> (Vec<T>, Vec<T>) {
        let scale: Vec<T> = self.gamma.iter().zip(&self.var).map(|(&g, &v)| g / (v + self.eps).sqrt()).collect();
        let shift = self.beta.iter().zip(&self.mean).zip(&scale).map(|((&b, &m), &s)| b - m * s).collect();
        (scale, shift)
    }

    pub fn cast<U: Real>(&self) -> BatchNorm<U> {
        let c = |v: &[T]| v.iter().map(|x| U::of(x.as_f64())).collect::<Vec<U>>();
        BatchNorm {
            mean: c(&self.mean),
            var: c(&self.var),
            gamma: c(&self.gamma),
            beta: c(&self.beta),
            eps: U::of(self.eps.as_f64()),
            momentum: U::of(self.momentum.as_f64()),
        }
    }

    /// Exponential moving average update of the running statistics.
    pub fn update_running(&mut self, stats: &BatchStats<T>, momentum: T) {
        let keep = T::one() - momentum;
        for c in 0..self.channels() {
            self.mean[c] = keep * self.mean[c] + momentum * stats.mean[c];
            self.var[c] = keep * self.var[c] + momentum * stats.unbiased_var(c);
        }
    }
}

/// Per-channel mean and (biased) variance of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: usize,
}

impl<T: Real> BatchStats<T> {
    pub fn unbiased_var(&self, c: usize) -> T {
        if self.count > 1 {
            self.var[c] * T::of(self.count as f64 / (self.count - 1) as f64)
        } else {
            self.var[c]
        }
    }
}

fn check_channels<T: Real>(x: &Tensor4<T>, bn: &BatchNorm<T>) -> Result<()> {
    bn.validate()?;
    if x.dims().c != bn.channels() {
        return Err(shape_err!("batch norm has {} channels, input is {}", bn.channels(), x.dims()));
    }
    Ok(())
}

pub fn batch_stats<T: Real>(x: &Tensor4<T>) -> BatchStats<T> {
    let d = x.dims();
    let count = d.n * d.plane();
    let inv = 1.0 / count as f64;
    let mut mean = vec![T::zero(); d.c];
    let mut var = vec![T::zero(); d.c];
    for c in 0..d.c {
        let mut s = 0.0;
        for n in 0..d.n {
            s += x.plane(n, c).iter().map(|v| v.as_f64()).sum::<f64>();
        }
        let m = s * inv;
        let mut sq = 0.0;
        for n in 0..d.n {
            sq += x.plane(n, c).iter().map(|v| (v.as_f64() - m) * (v.as_f64() - m)).sum::<f64>();
        }
        mean[c] = T::of(m);
        var[c] = T::of(sq * inv);
    }
    BatchStats { mean, var, count }
}

fn apply_affine<T: Real>(x: &Tensor4<T>, scale: &[T], shift: &[T]) -> Tensor4<T> {
    let d = x.dims();
    let mut y = x.clone();
    for n in 0..d.n {
        for c in 0..d.c {
            let (s, b) = (scale[c], shift[c]);
            for v in y.plane_mut(n, c) {
                *v = *v * s + b;
            }
        }
    }
    y
}

/// `γ·(x−μ)/sqrt(σ+ε) + β` with the stored running statistics.
pub fn batch_norm_eval<T: Real>(x: &Tensor4<T>, bn: &BatchNorm<T>) -> Result<Tensor4<T>> {
    check_channels(x, bn)?;
    let d = x.dims();
    let mut y = x.clone();
    for n in 0..d.n {
        for c in 0..d.c {
            let inv = (bn.var[c] + bn.eps).sqrt();
            let (g, b, m) = (bn.gamma[c], bn.beta[c], bn.mean[c]);
            for v in y.plane_mut(n, c) {
                *v = g * (*v - m) / inv + b;
            }
        }
    }
    Ok(y)
}

/// Normalizes with the batch's own statistics and folds them into the running
/// averages. Returns the output and the batch statistics used.
pub fn batch_norm_train<T: Real>(x: &Tensor4<T>, bn: &mut BatchNorm<T>) -> Result<(Tensor4<T>, BatchStats<T>)> {
    check_channels(x, bn)?;
    let stats = batch_stats(x);
    let scale: Vec<T> = (0..bn.channels()).map(|c| bn.gamma[c] / (stats.var[c] + bn.eps).sqrt()).collect();
    let shift: Vec<T> = (0..bn.channels()).map(|c| bn.beta[c] - stats.mean[c] * scale[c]).collect();
    let y = apply_affine(x, &scale, &shift);
    let m = bn.momentum;
    bn.update_running(&stats, m);
    Ok((y, stats))
}

/// Backward of train-mode batch norm, gradients flowing through the batch
/// statistics. Returns `(dx, dγ, dβ)`.
pub fn batch_norm_train_backward<T: Real>(
    x: &Tensor4<T>,
    stats: &BatchStats<T>,
    bn: &BatchNorm<T>,
    dy: &Tensor4<T>,
) -> Result<(Tensor4<T>, Vec<T>, Vec<T>)> {
    if x.dims() != dy.dims() {
        return Err(shape_err!("batch norm grad {} != input {}", dy.dims(), x.dims()));
    }
    let d = x.dims();
    let count = T::of(stats.count as f64);
    let mut dx = Tensor4::zeros(d);
    let mut dgamma = vec![T::zero(); d.c];
    let mut dbeta = vec![T::zero(); d.c];
    for c in 0..d.c {
        let inv_std = T::one() / (stats.var[c] + bn.eps).sqrt();
        let mean = stats.mean[c];
        let (mut sum_dy, mut sum_dy_xhat) = (T::zero(), T::zero());
        for n in 0..d.n {
            for (&g, &v) in dy.plane(n, c).iter().zip(x.plane(n, c)) {
                sum_dy += g;
                sum_dy_xhat += g * (v - mean) * inv_std;
            }
        }
        dgamma[c] = sum_dy_xhat;
        dbeta[c] = sum_dy;
        let k = bn.gamma[c] * inv_std / count;
        for n in 0..d.n {
            let xs = x.plane(n, c);
            let gs = dy.plane(n, c);
            let out = dx.plane_mut(n, c);
            for i in 0..out.len() {
                let xhat = (xs[i] - mean) * inv_std;
                out[i] = k * (count * gs[i] - sum_dy - xhat * sum_dy_xhat);
            }
        }
    }
    Ok((dx, dgamma, dbeta))
}
