//! Desk-scale training: gradients through the whole network, OHEM loss,
//! SGD, a synthetic dataset and the mIoU metric.

mod data;
mod loss;
mod metrics;
mod optim;
mod toy;

pub use data::{normalize, rgb_to_tensor, Scene, SyntheticShapes, SHAPE_CLASSES};
pub use loss::{ohem_cross_entropy, ohem_cross_entropy_grad, total_loss, LossBreakdown, MinKept, OhemConfig, AUX_WEIGHT, IGNORE_LABEL};
pub use metrics::{miou, ConfusionMatrix};
pub use optim::{sgd_update, PolyLr, Sgd};
pub use toy::{evaluate_miou, toy_train_run, ToyConfig, ToyRun, TraceRow, MAX_TOY_ITERS};

use alloc::vec::Vec;

use crate::autograd::{Gradients, Tape};
use crate::exec::ParamKey;
use crate::network::{Form, Network};
use crate::ops::{BatchStats, LabelMap, Mode};
use crate::{Error, Real, Result, Tensor4};

/// Result of one forward/backward pass.
#[derive(Debug, Clone)]
pub struct TrainStep<T> {
    pub loss: LossBreakdown,
    pub grads: Gradients<T>,
    /// Batch statistics seen by each batch norm, for the running averages.
    pub bn_stats: Vec<(ParamKey, BatchStats<T>)>,
}

/// Train-mode forward and reverse pass of `L = L_sh + α·L_ash`.
pub fn backward<T: Real>(net: &Network<T>, x: &Tensor4<T>, labels: &LabelMap, ohem: &OhemConfig, alpha: f64) -> Result<TrainStep<T>> {
    if net.form != Form::Training {
        return Err(Error::Form("inference-form networks cannot be trained".into()));
    }
    let mut tape = Tape::new(Mode::Train);
    let input = tape.leaf(x.clone());
    let out = net.forward_with(&mut tape, &input, true)?;
    let (l_sh, g_sh) = ohem_cross_entropy_grad(tape.value(out.logits), labels, ohem)?;
    let mut seeds = alloc::vec![(out.logits, g_sh)];
    let mut l_ash = T::zero();
    if let Some(aux) = out.aux {
        let (l, g) = ohem_cross_entropy_grad(tape.value(aux), labels, ohem)?;
        l_ash = l;
        seeds.push((aux, g.scale(T::of(alpha))));
    }
    let grads = tape.backward(&seeds)?;
    Ok(TrainStep { loss: LossBreakdown::new(l_sh.as_f64(), l_ash.as_f64(), alpha), grads, bn_stats: tape.bn_stats() })
}
