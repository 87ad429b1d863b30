//! Parameter and operation accounting.
//!
//! Convolutions cost one multiply-accumulate per weight per output pixel.
//! `flops` counts 2 per MAC plus 1 per bias add and per elementwise op;
//! `macs` alone is the convention most segmentation papers report as
//! "FLOPs".

use crate::exec::Exec;
use crate::network::Network;
use crate::ops::{conv_out_len, BatchNorm, ConvKernel};
use crate::error::shape_err;
use crate::{Dims, Real, Result};

/// Shape-only executor that tallies work instead of computing it.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct Counter {
    pub macs: u64,
    pub flops: u64,
}

impl<'a, T: Real> Exec<'a, T> for Counter {
    type Value = Dims;

    fn dims(&self, v: &Dims) -> Dims {
        *v
    }

    fn conv(&mut self, x: &Dims, k: &'a ConvKernel<T>) -> Result<Dims> {
        let out = k.out_dims(*x)?;
        let macs = (out.len() * k.c_in() * k.k() * k.k()) as u64;
        self.macs += macs;
        self.flops += 2 * macs + out.len() as u64;
        Ok(out)
    }

    fn batch_norm(&mut self, x: &Dims, bn: &'a BatchNorm<T>) -> Result<Dims> {
        if x.c != bn.channels() {
            return Err(shape_err!("batch norm has {} channels, input is {x}", bn.channels()));
        }
        self.flops += 2 * x.len() as u64;
        Ok(*x)
    }

    fn relu(&mut self, x: &Dims) -> Dims {
        self.flops += x.len() as u64;
        *x
    }

    fn add(&mut self, a: &Dims, b: &Dims) -> Result<Dims> {
        if a != b {
            return Err(shape_err!("cannot add {a} and {b}"));
        }
        self.flops += a.len() as u64;
        Ok(*a)
    }

    fn resize(&mut self, x: &Dims, h: usize, w: usize) -> Result<Dims> {
        let out = x.with_hw(h, w);
        if out != *x {
            // three lerps of two multiplies and one add
            self.flops += 9 * out.len() as u64;
        }
        Ok(out)
    }

    fn avg_pool(&mut self, x: &Dims, kernel: usize, stride: usize, pad: usize) -> Result<Dims> {
        let out = x.with_hw(conv_out_len(x.h, kernel, stride, pad)?, conv_out_len(x.w, kernel, stride, pad)?);
        self.flops += (out.len() * kernel * kernel) as u64;
        Ok(out)
    }

    fn global_avg_pool(&mut self, x: &Dims) -> Dims {
        self.flops += x.len() as u64;
        x.with_hw(1, 1)
    }

    fn concat(&mut self, parts: &[Dims]) -> Result<Dims> {
        let first = parts.first().ok_or_else(|| shape_err!("concat of zero tensors"))?;
        let c = parts.iter().map(|d| d.c).sum();
        Ok(first.with_c(c))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostReport {
    pub params: u64,
    pub macs: u64,
    pub flops: u64,
}

impl CostReport {
    pub fn params_m(&self) -> f64 {
        self.params as f64 / 1e6
    }

    pub fn gmacs(&self) -> f64 {
        self.macs as f64 / 1e9
    }

    pub fn gflops(&self) -> f64 {
        self.flops as f64 / 1e9
    }
}

/// Parameters of `net` and the cost of one eval-mode forward on a single
/// `h × w` image. The auxiliary head counts toward parameters while it
/// exists but never toward operations.
pub fn count_params_flops<T: Real>(net: &Network<T>, h: usize, w: usize) -> Result<CostReport> {
    let mut counter = Counter::default();
    net.forward_with(&mut counter, &Dims::new(1, 3, h, w), false)?;
    Ok(CostReport { params: net.param_count() as u64, macs: counter.macs, flops: counter.flops })
}

/// Cost of a single convolution on one `h × w` input.
pub fn conv_cost<T: Real>(k: &ConvKernel<T>, h: usize, w: usize) -> Result<CostReport> {
    let mut counter = Counter::default();
    Exec::<T>::conv(&mut counter, &Dims::new(1, k.c_in(), h, w), k)?;
    Ok(CostReport { params: k.param_count() as u64, macs: counter.macs, flops: counter.flops })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Form, NetworkConfig, Variant};

    #[test]
    fn single_conv_hand_count() {
        let k = ConvKernel::<f64>::zeros(1, 1, 3, 1, 1);
        let c = conv_cost(&k, 10, 10).unwrap();
        assert_eq!(c.params, 10);
        assert_eq!(c.macs, 900);
        assert_eq!(c.flops, 2 * 9 * 100 + 100);
    }

    #[test]
    fn conv_macs_scale_linearly_with_area() {
        let cfg = NetworkConfig::new(Variant::S, 19);
        let net = Network::<f32>::skeleton(cfg.clone(), Form::Inference).unwrap();
        let a = count_params_flops(&net, 1024, 2048).unwrap();
        let b = count_params_flops(&net, 1024, 4096).unwrap();
        assert_eq!(a.params, b.params);
        // Everything doubles except the 1x1 conv behind global pooling,
        // whose input is 1x1 at any resolution.
        let global_branch = (16 * cfg.base_channels * cfg.ppm_branch()) as u64;
        assert_eq!(2 * a.macs - b.macs, global_branch);
    }
}
