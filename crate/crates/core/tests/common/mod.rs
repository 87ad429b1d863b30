#![allow(dead_code)]

use gcnet_core::blocks::{BlockSpec, GcBlock, HasParams, Init, ParamMut};
use gcnet_core::ops::{BatchNorm, ConvKernel};
use gcnet_core::{Dims, Real, Tensor4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn<T: Real>(dims: Dims, rng: &mut ChaCha8Rng) -> Tensor4<T> {
    Tensor4::randn(dims, rng)
}

pub fn random_bn<T: Real>(c: usize, rng: &mut ChaCha8Rng) -> BatchNorm<T> {
    let mut bn = BatchNorm::new(c);
    for i in 0..c {
        bn.mean[i] = T::of(rng.random_range(-0.5..0.5));
        bn.var[i] = T::of(rng.random_range(0.2..2.0));
        bn.gamma[i] = T::of(rng.random_range(0.5..1.5));
        bn.beta[i] = T::of(rng.random_range(-0.5..0.5));
    }
    bn
}

pub fn random_conv<T: Real>(c_out: usize, c_in: usize, k: usize, stride: usize, pad: usize, rng: &mut ChaCha8Rng) -> ConvKernel<T> {
    let mut kernel = ConvKernel::zeros(c_out, c_in, k, stride, pad);
    let scale = 1.0 / ((c_in * k * k) as f64).sqrt();
    for w in kernel.weight.data_mut() {
        *w = T::of(rng.random_range(-1.0..1.0) * scale);
    }
    for b in &mut kernel.bias {
        *b = T::of(rng.random_range(-0.3..0.3));
    }
    kernel
}

/// Gives every batch norm non-trivial statistics and every conv a bias, so
/// that contraction has real work to do.
pub fn randomize<T: Real, P: HasParams<T>>(p: &mut P, rng: &mut ChaCha8Rng) {
    let mut leaves = Vec::new();
    p.params_mut("", &mut leaves);
    for (_, leaf) in leaves {
        match leaf {
            ParamMut::Bn(bn) => *bn = random_bn(bn.channels(), rng),
            ParamMut::Conv(k) => {
                for b in &mut k.bias {
                    *b = T::of(rng.random_range(-0.2..0.2));
                }
            }
        }
    }
}

pub fn random_block<T: Real>(spec: BlockSpec, seed: u64) -> GcBlock<T> {
    let mut r = rng(seed ^ 0xb10c);
    let mut b = GcBlock::new(spec, &mut Init::He(rng(seed))).unwrap();
    randomize(&mut b, &mut r);
    b
}

pub fn max_rel(a: &Tensor4<f64>, b: &Tensor4<f64>) -> f64 {
    let scale = a.max_abs().max(b.max_abs()).max(1e-300);
    a.max_abs_diff(b).unwrap() / scale
}
