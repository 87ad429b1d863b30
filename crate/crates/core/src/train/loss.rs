use alloc::vec::Vec;

use crate::error::{invalid, shape_err};
use crate::ops::LabelMap;
use crate::{Real, Result, Tensor4};

pub const IGNORE_LABEL: u32 = 255;

/// Floor on the number of pixels OHEM keeps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MinKept {
    Count(usize),
    /// Fraction of all pixels in the batch, rounded down.
    Fraction(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OhemConfig {
    /// Pixels whose true-class probability is below this are "hard".
    pub thresh: f64,
    pub min_kept: MinKept,
    pub ignore: u32,
}

impl Default for OhemConfig {
    fn default() -> Self {
        OhemConfig { thresh: 0.7, min_kept: MinKept::Fraction(1.0 / 16.0), ignore: IGNORE_LABEL }
    }
}

impl OhemConfig {
    /// Plain mean cross-entropy over non-ignored pixels.
    pub fn keep_all() -> Self {
        OhemConfig { thresh: 1.0, min_kept: MinKept::Count(usize::MAX), ignore: IGNORE_LABEL }
    }
}

struct PixelLoss {
    /// offset of the pixel inside its image plane
    n: usize,
    i: usize,
    p_true: f64,
    nll: f64,
}

fn check_inputs<T: Real>(logits: &Tensor4<T>, labels: &LabelMap, cfg: &OhemConfig) -> Result<()> {
    let d = logits.dims();
    if labels.n != d.n || labels.h != d.h || labels.w != d.w {
        return Err(shape_err!("labels {}x{}x{} do not match logits {d}", labels.n, labels.h, labels.w));
    }
    if let Some(bad) = labels.data.iter().find(|&&l| l != cfg.ignore && l as usize >= d.c) {
        return Err(invalid!("label {bad} out of range for {} classes", d.c));
    }
    Ok(())
}

/// Selected pixels and their per-pixel losses.
fn select<T: Real>(logits: &Tensor4<T>, labels: &LabelMap, cfg: &OhemConfig) -> Result<Vec<PixelLoss>> {
    check_inputs(logits, labels, cfg)?;
    let d = logits.dims();
    let p = d.plane();
    let mut all = Vec::new();
    for n in 0..d.n {
        let img = labels.image(n);
        for (i, &label) in img.iter().enumerate() {
            if label == cfg.ignore {
                continue;
            }
            let at = |c: usize| logits.data()[(n * d.c + c) * p + i].as_f64();
            let max = (0..d.c).map(at).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + libm::log((0..d.c).map(|c| libm::exp(at(c) - max)).sum::<f64>());
            let nll = lse - at(label as usize);
            all.push(PixelLoss { n, i, p_true: libm::exp(-nll), nll });
        }
    }
    let min_kept = match cfg.min_kept {
        MinKept::Count(k) => k,
        MinKept::Fraction(f) => (f * (d.n * p) as f64) as usize,
    }
    .min(all.len());
    let hard = all.iter().filter(|px| px.p_true < cfg.thresh).count();
    if hard >= min_kept {
        all.retain(|px| px.p_true < cfg.thresh);
    } else {
        // stable: ties keep scan order
        all.sort_by(|a, b| a.p_true.total_cmp(&b.p_true));
        all.truncate(min_kept);
    }
    Ok(all)
}

/// Mean softmax cross-entropy over the hard pixels: every non-ignored pixel
/// whose true-class probability is below `thresh`, topped up to `min_kept`
/// with the hardest of the rest. Zero when nothing is selected.
pub fn ohem_cross_entropy<T: Real>(logits: &Tensor4<T>, labels: &LabelMap, cfg: &OhemConfig) -> Result<T> {
    let kept = select(logits, labels, cfg)?;
    if kept.is_empty() {
        return Ok(T::zero());
    }
    Ok(T::of(kept.iter().map(|px| px.nll).sum::<f64>() / kept.len() as f64))
}

/// Loss and its gradient with respect to the logits. The selection mask is
/// treated as constant.
pub fn ohem_cross_entropy_grad<T: Real>(logits: &Tensor4<T>, labels: &LabelMap, cfg: &OhemConfig) -> Result<(T, Tensor4<T>)> {
    let kept = select(logits, labels, cfg)?;
    let d = logits.dims();
    let mut grad = Tensor4::zeros(d);
    if kept.is_empty() {
        return Ok((T::zero(), grad));
    }
    let p = d.plane();
    let inv = 1.0 / kept.len() as f64;
    let mut total = 0.0;
    for px in &kept {
        total += px.nll;
        let at = |c: usize| logits.data()[(px.n * d.c + c) * p + px.i].as_f64();
        let max = (0..d.c).map(at).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..d.c).map(|c| libm::exp(at(c) - max)).sum();
        let label = labels.image(px.n)[px.i] as usize;
        for c in 0..d.c {
            let soft = libm::exp(at(c) - max) / z;
            let target = if c == label { 1.0 } else { 0.0 };
            grad.data_mut()[(px.n * d.c + c) * p + px.i] = T::of((soft - target) * inv);
        }
    }
    Ok((T::of(total * inv), grad))
}

/// The two loss terms and their weighted sum `L = L_sh + α·L_ash`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_sh: f64,
    pub l_ash: f64,
    pub alpha: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(l_sh: f64, l_ash: f64, alpha: f64) -> Self {
        LossBreakdown { l_sh, l_ash, alpha, total: l_sh + alpha * l_ash }
    }
}

pub const AUX_WEIGHT: f64 = 0.4;

pub fn total_loss<T: Real>(
    sh_logits: &Tensor4<T>,
    ash_logits: &Tensor4<T>,
    labels: &LabelMap,
    alpha: f64,
    cfg: &OhemConfig,
) -> Result<LossBreakdown> {
    let l_sh = ohem_cross_entropy(sh_logits, labels, cfg)?.as_f64();
    let l_ash = ohem_cross_entropy(ash_logits, labels, cfg)?.as_f64();
    Ok(LossBreakdown::new(l_sh, l_ash, alpha))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Dims;
    use alloc::vec;

    fn map(n: usize, h: usize, w: usize, v: Vec<u32>) -> LabelMap {
        LabelMap::new(n, h, w, v).unwrap()
    }

    #[test]
    fn confident_correct_pixel_has_vanishing_loss() {
        let logits = Tensor4::from_vec(Dims::new(1, 2, 1, 1), vec![60.0f64, 0.0]).unwrap();
        let cfg = OhemConfig { thresh: 1.0, min_kept: MinKept::Count(1), ignore: IGNORE_LABEL };
        let l = ohem_cross_entropy(&logits, &map(1, 1, 1, vec![0]), &cfg).unwrap();
        assert!(l < 1e-25);
    }

    #[test]
    fn uniform_logits_give_log_k() {
        let logits = Tensor4::<f64>::zeros(Dims::new(2, 5, 3, 3));
        let labels = map(2, 3, 3, (0..18).map(|i| i % 5).collect());
        let l = ohem_cross_entropy(&logits, &labels, &OhemConfig::default()).unwrap();
        assert!((l - libm::log(5.0)).abs() < 1e-14);
    }

    #[test]
    fn fixed_2x2_selection_matches_hand_evaluation() {
        // Two classes, logits (a, b) per pixel; p_true = softmax of the label.
        // pixel 0: label 0, (2, 0)  -> p = 0.8808 (easy)
        // pixel 1: label 1, (0, 0)  -> p = 0.5    (hard)
        // pixel 2: label 0, (1, 0)  -> p = 0.7311 (easy, but hardest easy)
        // pixel 3: label 1, (0, 3)  -> p = 0.9526 (easy)
        // thresh 0.7 selects only pixel 1; min_kept 2 pulls in pixel 2.
        let logits = Tensor4::from_vec(Dims::new(1, 2, 2, 2), vec![2.0f64, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 3.0]).unwrap();
        let labels = map(1, 2, 2, vec![0, 1, 0, 1]);
        let cfg = OhemConfig { thresh: 0.7, min_kept: MinKept::Count(2), ignore: IGNORE_LABEL };
        let l = ohem_cross_entropy(&logits, &labels, &cfg).unwrap();
        let nll1 = libm::log(2.0);
        let nll2 = libm::log(1.0 + libm::exp(-1.0));
        assert!((l - (nll1 + nll2) / 2.0).abs() < 1e-15);

        let cfg1 = OhemConfig { min_kept: MinKept::Count(1), ..cfg };
        assert!((ohem_cross_entropy(&logits, &labels, &cfg1).unwrap() - nll1).abs() < 1e-15);
    }

    #[test]
    fn all_ignored_is_zero() {
        let logits = Tensor4::<f64>::full(Dims::new(1, 3, 2, 2), 1.0);
        let labels = LabelMap::filled(1, 2, 2, IGNORE_LABEL);
        assert_eq!(ohem_cross_entropy(&logits, &labels, &OhemConfig::default()).unwrap(), 0.0);
        let (l, g) = ohem_cross_entropy_grad(&logits, &labels, &OhemConfig::default()).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn keep_all_is_plain_mean_ce() {
        let logits = Tensor4::from_vec(Dims::new(1, 3, 1, 3), vec![0.2f64, 5.0, -1.0, 1.0, 0.0, 2.0, -0.3, 0.1, 0.0]).unwrap();
        let labels = map(1, 1, 3, vec![1, IGNORE_LABEL, 2]);
        let l = ohem_cross_entropy(&logits, &labels, &OhemConfig::keep_all()).unwrap();
        let ce = |v: [f64; 3], t: usize| {
            let z: f64 = v.iter().map(|x| libm::exp(*x)).sum();
            libm::log(z) - v[t]
        };
        let want = (ce([0.2, 1.0, -0.3], 1) + ce([-1.0, 2.0, 0.0], 2)) / 2.0;
        assert!((l - want).abs() < 1e-14);
    }

    #[test]
    fn rejects_out_of_range_labels() {
        let logits = Tensor4::<f64>::zeros(Dims::new(1, 2, 1, 1));
        assert!(ohem_cross_entropy(&logits, &map(1, 1, 1, vec![2]), &OhemConfig::default()).is_err());
        assert!(ohem_cross_entropy(&logits, &map(1, 1, 2, vec![0, 0]), &OhemConfig::default()).is_err());
    }

    #[test]
    fn total_loss_weights_aux_term() {
        let a = Tensor4::<f64>::zeros(Dims::new(1, 4, 2, 2));
        let labels = map(1, 2, 2, vec![0, 1, 2, 3]);
        let cfg = OhemConfig::default();
        let b = total_loss(&a, &a, &labels, AUX_WEIGHT, &cfg).unwrap();
        assert!((b.total - 1.4 * b.l_sh).abs() < 1e-15);
        assert_eq!(total_loss(&a, &a, &labels, 0.0, &cfg).unwrap().total, b.l_sh);
    }
}
