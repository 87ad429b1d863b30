//! Numerical equivalence between a training-form network and its contraction.

use gcnet_core::network::{Form, Network};
use gcnet_core::reparam::contract_network;
use gcnet_core::{Dims, Real, Tensor4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Logit margins at or below this are treated as ties when comparing argmaxes.
pub const TIE_MARGIN: f64 = 1e-6;

/// Tolerance used when either side went through f32 file storage.
pub const RELAXED_REL_TOL: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Tolerance {
    /// Maximum absolute logit difference.
    Abs(f64),
    /// Maximum absolute difference over the largest reference logit.
    Rel(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub trials: usize,
    pub max_abs: f64,
    pub max_rel: f64,
    /// Pixels whose argmax differs where the reference top-two margin exceeds
    /// [`TIE_MARGIN`].
    pub disagreements: usize,
    pub pixels: usize,
    pub tolerance: Tolerance,
    pub pass: bool,
}

impl std::fmt::Display for CheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} trials: max abs {:.3e}, max rel {:.3e}, argmax disagreements {}/{} ({:?}) -> {}",
            self.trials,
            self.max_abs,
            self.max_rel,
            self.disagreements,
            self.pixels,
            self.tolerance,
            if self.pass { "PASS" } else { "FAIL" }
        )
    }
}

/// Pixels where `a` and `b` disagree on the argmax even though `a` has a
/// clear winner.
pub fn argmax_disagreements<T: Real>(a: &Tensor4<T>, b: &Tensor4<T>, margin: f64) -> usize {
    let d = a.dims();
    let p = d.plane();
    let mut count = 0;
    for n in 0..d.n {
        for i in 0..p {
            let at = |t: &Tensor4<T>, c: usize| t.data()[(n * d.c + c) * p + i].as_f64();
            let (mut best, mut second, mut arg) = (f64::NEG_INFINITY, f64::NEG_INFINITY, 0);
            for c in 0..d.c {
                let v = at(a, c);
                if v > best {
                    second = best;
                    best = v;
                    arg = c;
                } else if v > second {
                    second = v;
                }
            }
            if best - second <= margin {
                continue;
            }
            let mut b_arg = 0;
            for c in 1..d.c {
                if at(b, c) > at(b, b_arg) {
                    b_arg = c;
                }
            }
            count += usize::from(b_arg != arg);
        }
    }
    count
}

/// Runs `trials` seeded random inputs through both networks in eval mode.
pub fn compare<T: Real>(
    reference: &Network<T>,
    candidate: &Network<T>,
    trials: usize,
    h: usize,
    w: usize,
    seed: u64,
    tolerance: Tolerance,
) -> gcnet_core::Result<CheckReport> {
    if trials == 0 {
        return Err(gcnet_core::Error::Invalid("trials must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut max_abs, mut max_rel, mut disagreements, mut pixels) = (0f64, 0f64, 0, 0);
    for _ in 0..trials {
        let x = Tensor4::<T>::randn(Dims::new(1, 3, h, w), &mut rng);
        let a = reference.forward(&x)?;
        let b = candidate.forward(&x)?;
        let diff = a.max_abs_diff(&b)?.as_f64();
        let scale = a.max_abs().as_f64().max(f64::MIN_POSITIVE);
        max_abs = max_abs.max(diff);
        max_rel = max_rel.max(diff / scale);
        disagreements += argmax_disagreements(&a, &b, TIE_MARGIN);
        pixels += a.dims().plane();
    }
    let pass = match tolerance {
        Tolerance::Abs(t) => max_abs <= t,
        Tolerance::Rel(t) => max_rel <= t,
    } && max_abs.is_finite();
    Ok(CheckReport { trials, max_abs, max_rel, disagreements, pixels, tolerance, pass })
}

/// Contracts a training-form network in memory and compares the two forms.
pub fn check_contraction<T: Real>(net: &Network<T>, trials: usize, h: usize, w: usize, seed: u64, tolerance: Tolerance) -> gcnet_core::Result<CheckReport> {
    if net.form != Form::Training {
        return Err(gcnet_core::Error::Form("check needs a training-form model".into()));
    }
    let contracted = contract_network(net)?;
    compare(net, &contracted, trials, h, w, seed, tolerance)
}
