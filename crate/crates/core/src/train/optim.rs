use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::Gradients;
use crate::blocks::ParamMut;
use crate::error::invalid;
use crate::network::Network;
use crate::{Real, Result};

/// Polynomial decay `base · (1 − iter/max_iter)^power`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolyLr {
    pub base_lr: f64,
    pub max_iter: usize,
    pub power: f64,
}

impl PolyLr {
    pub fn at(&self, iter: usize) -> Result<f64> {
        if iter >= self.max_iter {
            return Err(invalid!("iteration {iter} is past the schedule end {}", self.max_iter));
        }
        Ok(self.base_lr * libm::pow(1.0 - iter as f64 / self.max_iter as f64, self.power))
    }
}

/// One momentum-SGD update of a flat parameter slice:
/// `v ← μ·v + (g + λ·p)`, `p ← p − lr·v`.
pub fn sgd_update<T: Real>(param: &mut [T], velocity: &mut [T], grad: &[T], lr: f64, momentum: f64, decay: f64) {
    let (lr, mu, wd) = (T::of(lr), T::of(momentum), T::of(decay));
    for ((p, v), g) in param.iter_mut().zip(velocity.iter_mut()).zip(grad) {
        *v = mu * *v + (*g + wd * *p);
        *p -= lr * *v;
    }
}

/// SGD with momentum, weight decay on convolution weights only, and a
/// polynomial learning-rate schedule.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub schedule: PolyLr,
    pub momentum: f64,
    pub weight_decay: f64,
    pub iter: usize,
    velocity: Vec<Vec<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(base_lr: f64, max_iter: usize) -> Self {
        Sgd { schedule: PolyLr { base_lr, max_iter, power: 0.9 }, momentum: 0.9, weight_decay: 0.0005, iter: 0, velocity: Vec::new() }
    }

    pub fn lr(&self) -> Result<f64> {
        self.schedule.at(self.iter)
    }

    /// Applies `grads` to `net` and advances the schedule. Returns the
    /// learning rate used. Parameters without a gradient still feel momentum
    /// and decay.
    pub fn step(&mut self, net: &mut Network<T>, grads: &Gradients<T>) -> Result<f64> {
        let lr = self.lr()?;
        let (mu, wd) = (self.momentum, self.weight_decay);
        let mut params = net.params_mut();
        if self.velocity.is_empty() {
            for (_, p) in &params {
                let (a, b) = match p {
                    ParamMut::Conv(k) => (k.weight.data().len(), k.bias.len()),
                    ParamMut::Bn(bn) => (bn.gamma.len(), bn.beta.len()),
                };
                self.velocity.push(vec![T::zero(); a]);
                self.velocity.push(vec![T::zero(); b]);
            }
        }
        if self.velocity.len() != 2 * params.len() {
            return Err(invalid!("optimizer state does not match network structure"));
        }
        let mut slots = self.velocity.iter_mut();
        for (_, p) in params.iter_mut() {
            let (v0, v1) = (slots.next().expect("sized above"), slots.next().expect("sized above"));
            match p {
                ParamMut::Conv(k) => {
                    let g = grads.conv(k).cloned();
                    let zw = vec![T::zero(); k.weight.data().len()];
                    let zb = vec![T::zero(); k.bias.len()];
                    let (gw, gb) = g.map_or((zw, zb), |g| (g.weight, g.bias));
                    sgd_update(k.weight.data_mut(), v0, &gw, lr, mu, wd);
                    sgd_update(&mut k.bias, v1, &gb, lr, mu, 0.0);
                }
                ParamMut::Bn(bn) => {
                    let g = grads.bn(bn).cloned();
                    let (gg, gb) = g.map_or((vec![T::zero(); bn.gamma.len()], vec![T::zero(); bn.beta.len()]), |g| (g.gamma, g.beta));
                    sgd_update(&mut bn.gamma, v0, &gg, lr, mu, 0.0);
                    sgd_update(&mut bn.beta, v1, &gb, lr, mu, 0.0);
                }
            }
        }
        self.iter += 1;
        Ok(lr)
    }
}
