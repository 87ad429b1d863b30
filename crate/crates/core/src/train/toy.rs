use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::data::{SyntheticShapes, SHAPE_CLASSES};
use super::loss::{LossBreakdown, OhemConfig, AUX_WEIGHT};
use super::metrics::ConfusionMatrix;
use super::optim::Sgd;
use super::backward;
use crate::error::invalid;
use crate::exec::Eager;
use crate::network::{Network, NetworkConfig, Variant};
use crate::ops::{argmax_channel, Mode};
use crate::{Error, Real, Result};

pub const MAX_TOY_ITERS: usize = 2000;

/// Validation scenes live far from the training indices.
const VAL_OFFSET: u64 = 1 << 40;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyConfig {
    pub base_channels: usize,
    pub image: usize,
    pub batch: usize,
    pub base_lr: f64,
    pub alpha: f64,
    pub ohem: OhemConfig,
    pub val_images: usize,
    pub eval_every: usize,
    /// Train-mode passes averaged into the final BN running statistics.
    pub bn_batches: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            base_channels: 8,
            image: 256,
            batch: 4,
            base_lr: 0.02,
            alpha: AUX_WEIGHT,
            ohem: OhemConfig::default(),
            val_images: 16,
            eval_every: 50,
            bn_batches: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    /// 1-based
    pub iter: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub val_miou: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ToyRun<T> {
    pub net: Network<T>,
    pub trace: Vec<TraceRow>,
    pub final_miou: f64,
}

impl ToyConfig {
    pub fn network(&self) -> NetworkConfig {
        NetworkConfig::new(Variant::S, SHAPE_CLASSES)
            .with_base_channels(self.base_channels)
            .with_input(self.image, self.image)
    }

    pub fn train_set(&self, seed: u64) -> SyntheticShapes {
        SyntheticShapes::new(self.image, self.image, seed)
    }

    pub fn val_indices(&self) -> Vec<u64> {
        (0..self.val_images as u64).map(|i| VAL_OFFSET + i).collect()
    }
}

/// Held-out mIoU of `net` in eval mode. Works for either network form.
pub fn evaluate_miou<T: Real>(net: &Network<T>, data: &SyntheticShapes, indices: &[u64]) -> Result<f64> {
    let mut cm = ConfusionMatrix::new(net.num_classes());
    for chunk in indices.chunks(4) {
        let (x, y) = data.batch::<T>(chunk, &[])?;
        let pred = argmax_channel(&net.forward(&x)?);
        cm.add(&pred, &y, u32::MAX)?;
    }
    Ok(cm.miou())
}

/// Trains a narrow GCNet-S on synthetic shapes. Everything is derived from
/// `seed`, so equal seeds give identical traces.
pub fn toy_train_run<T: Real>(cfg: &ToyConfig, seed: u64, iters: usize) -> Result<ToyRun<T>> {
    if iters == 0 || iters > MAX_TOY_ITERS {
        return Err(invalid!("toy training runs 1..={MAX_TOY_ITERS} iterations, got {iters}"));
    }
    if cfg.batch < 2 {
        return Err(invalid!("train-mode batch norm needs a batch of at least 2"));
    }
    let data = cfg.train_set(seed);
    let val = cfg.val_indices();
    let mut net = Network::<T>::build(cfg.network(), seed)?;
    let mut opt = Sgd::new(cfg.base_lr, iters);
    let mut flip_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut trace = Vec::with_capacity(iters);

    for it in 0..iters {
        let idx: Vec<u64> = (0..cfg.batch as u64).map(|b| (it * cfg.batch) as u64 + b).collect();
        let flips: Vec<bool> = idx.iter().map(|_| flip_rng.random()).collect();
        let (x, y) = data.batch::<T>(&idx, &flips)?;
        let step = backward(&net, &x, &y, &cfg.ohem, cfg.alpha)?;
        if !step.loss.total.is_finite() {
            return Err(Error::Diverged { iter: it + 1, loss: step.loss.total });
        }
        net.apply_bn_stats(&step.bn_stats, None);
        let lr = opt.step(&mut net, &step.grads)?;
        let iter = it + 1;
        let val_miou = if iter % cfg.eval_every == 0 || iter == iters {
            Some(evaluate_miou(&net, &data, &val)?)
        } else {
            None
        };
        trace.push(TraceRow { iter, lr, loss: step.loss, val_miou });
    }

    finalize_bn(&mut net, &data, cfg, iters)?;
    let final_miou = evaluate_miou(&net, &data, &val)?;
    Ok(ToyRun { net, trace, final_miou })
}

/// Replaces the exponential running averages with an equal-weight average
/// over fresh training batches at the final weights.
fn finalize_bn<T: Real>(net: &mut Network<T>, data: &SyntheticShapes, cfg: &ToyConfig, iters: usize) -> Result<()> {
    for k in 0..cfg.bn_batches {
        let base = ((iters + k) * cfg.batch) as u64;
        let idx: Vec<u64> = (0..cfg.batch as u64).map(|b| base + b).collect();
        let (x, _) = data.batch::<T>(&idx, &[])?;
        let mut e = Eager::new(Mode::Train);
        net.forward_with(&mut e, &x, false)?;
        let stats = e.bn_stats;
        net.apply_bn_stats(&stats, Some(T::of(1.0 / (k + 1) as f64)));
    }
    Ok(())
}
