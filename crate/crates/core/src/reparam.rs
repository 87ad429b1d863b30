//! Lossless contraction of training-form structure into plain convolutions.
//!
//! All arithmetic runs in f64 whatever the model's scalar type, and results
//! are cast back at the end.

use alloc::vec;
use alloc::vec::Vec;

use crate::blocks::{ConvBn, FusionModule, GcBlock, Path, PyramidPooling, SegHead};
use crate::error::{invalid, shape_err};
use crate::network::{Form, Network};
use crate::ops::{BatchNorm, ConvKernel};
use crate::{Dims, Error, GemmDims, Real, Result, Strided, StridedMut, Tensor4};

/// Folds eval-mode batch norm into the preceding convolution:
/// `W' = γ/sqrt(σ+ε)·W`, `B' = (B−μ)·γ/sqrt(σ+ε) + β`.
pub fn fuse_conv_bn<T: Real>(k: &ConvKernel<T>, bn: &BatchNorm<T>) -> Result<ConvKernel<T>> {
    bn.validate()?;
    if bn.channels() != k.c_out() {
        return Err(shape_err!("batch norm has {} channels, conv outputs {}", bn.channels(), k.c_out()));
    }
    let eps = bn.eps.as_f64();
    let row = k.c_in() * k.k() * k.k();
    let mut weight = k.weight.clone();
    let mut bias = k.bias.clone();
    for o in 0..k.c_out() {
        let scale = bn.gamma[o].as_f64() / libm::sqrt(bn.var[o].as_f64() + eps);
        for w in &mut weight.data_mut()[o * row..(o + 1) * row] {
            *w = T::of(w.as_f64() * scale);
        }
        bias[o] = T::of((k.bias[o].as_f64() - bn.mean[o].as_f64()) * scale + bn.beta[o].as_f64());
    }
    ConvKernel::new(weight, bias, k.stride, k.padding)
}

/// Collapses `second ∘ first` where `second` is a 1×1, stride 1, unpadded
/// convolution: `W'[o] = Σ_m W₂[o,m]·W₁[m]`, `B' = W₂·B₁ + B₂`. Stride and
/// padding come from `first`.
pub fn merge_sequential<T: Real>(first: &ConvKernel<T>, second: &ConvKernel<T>) -> Result<ConvKernel<T>> {
    if second.k() != 1 || second.stride != 1 || second.padding != 0 {
        return Err(invalid!(
            "second stage must be 1x1 stride 1 pad 0, got {}x{} stride {} pad {}",
            second.k(),
            second.k(),
            second.stride,
            second.padding
        ));
    }
    if first.c_out() != second.c_in() {
        return Err(shape_err!("first stage outputs {} channels, second expects {}", first.c_out(), second.c_in()));
    }
    let (c_out, mid, kk) = (second.c_out(), first.c_out(), first.k());
    let row = first.c_in() * kk * kk;
    let w1: Vec<f64> = first.weight.data().iter().map(|v| v.as_f64()).collect();
    let w2: Vec<f64> = second.weight.data().iter().map(|v| v.as_f64()).collect();
    let mut acc = vec![0.0f64; c_out * row];
    f64::gemm(
        GemmDims { m: c_out, k: mid, n: row },
        1.0,
        Strided { data: &w2, rs: mid, cs: 1 },
        Strided { data: &w1, rs: row, cs: 1 },
        0.0,
        StridedMut { data: &mut acc, rs: row, cs: 1 },
    );
    let weight: Vec<T> = acc.into_iter().map(T::of).collect();
    let bias: Vec<T> = (0..c_out)
        .map(|o| {
            let b: f64 = (0..mid).map(|m| w2[o * mid + m] * first.bias[m].as_f64()).sum();
            T::of(b + second.bias[o].as_f64())
        })
        .collect();
    let weight = Tensor4::from_vec(Dims::new(c_out, first.c_in(), kk, kk), weight)?;
    ConvKernel::new(weight, bias, first.stride, first.padding)
}

/// Same as [`merge_sequential`] but refuses stages that still carry batch
/// norm: those must go through [`fuse_conv_bn`] first.
pub fn merge_stages<T: Real>(first: &ConvBn<T>, second: &ConvBn<T>) -> Result<ConvKernel<T>> {
    if first.bn.is_some() || second.bn.is_some() {
        return Err(invalid!("batch norm must be folded into each stage before merging"));
    }
    merge_sequential(&first.conv, &second.conv)
}

/// Places a 1×1 kernel at the center of an otherwise-zero 3×3 kernel and
/// pads by one so the output grid is unchanged at any stride.
pub fn embed_1x1_in_3x3<T: Real>(k: &ConvKernel<T>) -> Result<ConvKernel<T>> {
    if k.k() != 1 || k.padding != 0 {
        return Err(invalid!("expected an unpadded 1x1 kernel, got {}x{} pad {}", k.k(), k.k(), k.padding));
    }
    let (c_out, c_in) = (k.c_out(), k.c_in());
    let mut out = ConvKernel::zeros(c_out, c_in, 3, k.stride, 1);
    for o in 0..c_out {
        for i in 0..c_in {
            let idx = out.weight.index(o, i, 1, 1);
            out.weight.data_mut()[idx] = k.weight.data()[o * c_in + i];
        }
    }
    out.bias.clone_from(&k.bias);
    Ok(out)
}

/// The residual branch `BN(x)` as a 3×3 convolution: channel-identity 1×1,
/// embedded in 3×3, with the batch norm folded in.
pub fn residual_to_conv3x3<T: Real>(channels: usize, bn: &BatchNorm<T>, stride: usize) -> Result<ConvKernel<T>> {
    if stride != 1 {
        return Err(invalid!("residual connection only exists at stride 1, got stride {stride}"));
    }
    if bn.channels() != channels {
        return Err(shape_err!("residual batch norm has {} channels, expected {channels}", bn.channels()));
    }
    let id = embed_1x1_in_3x3(&ConvKernel::<T>::identity_1x1(channels))?;
    fuse_conv_bn(&id, bn)
}

/// Pairwise sum of a small slice in a fixed tree order.
fn tree_sum(v: &[f64]) -> f64 {
    match v.len() {
        0 => 0.0,
        1 => v[0],
        n => tree_sum(&v[..n / 2]) + tree_sum(&v[n / 2..]),
    }
}

/// Sorts the addends of each element before a pairwise tree sum, so the
/// result does not depend on the order of `values`.
fn order_free_sum(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    tree_sum(values)
}

/// Adds parallel kernels of identical geometry into one:
/// `W' = Σ Wᵢ`, `B' = Σ Bᵢ`. The result is bit-identical under any
/// permutation of the input list.
pub fn sum_parallel<T: Real>(kernels: &[ConvKernel<T>]) -> Result<ConvKernel<T>> {
    let first = kernels.first().ok_or_else(|| invalid!("cannot sum an empty list of kernels"))?;
    for k in &kernels[1..] {
        if k.weight.dims() != first.weight.dims() || k.stride != first.stride || k.padding != first.padding {
            return Err(shape_err!(
                "parallel kernels disagree: {} s{} p{} vs {} s{} p{}",
                first.weight.dims(),
                first.stride,
                first.padding,
                k.weight.dims(),
                k.stride,
                k.padding
            ));
        }
    }
    let mut scratch = vec![0.0f64; kernels.len()];
    let mut sum_at = |get: &dyn Fn(&ConvKernel<T>) -> T| {
        for (s, k) in scratch.iter_mut().zip(kernels) {
            *s = get(k).as_f64();
        }
        T::of(order_free_sum(&mut scratch))
    };
    let weight: Vec<T> = (0..first.weight.dims().len()).map(|i| sum_at(&|k| k.weight.data()[i])).collect();
    let bias: Vec<T> = (0..first.c_out()).map(|i| sum_at(&|k| k.bias[i])).collect();
    ConvKernel::new(Tensor4::from_vec(first.weight.dims(), weight)?, bias, first.stride, first.padding)
}

fn fold(cb: &ConvBn<f64>) -> Result<ConvKernel<f64>> {
    match &cb.bn {
        Some(bn) => fuse_conv_bn(&cb.conv, bn),
        None => Ok(cb.conv.clone()),
    }
}

fn path_to_conv3x3(p: &Path<f64>, channels: usize, stride: usize) -> Result<ConvKernel<f64>> {
    match p {
        Path::Conv3x3Conv1x1 { first, second } => merge_sequential(&fold(first)?, &fold(second)?),
        Path::Conv1x1Conv1x1 { first, second } => merge_sequential(&embed_1x1_in_3x3(&fold(first)?)?, &fold(second)?),
        Path::Residual { bn } => residual_to_conv3x3(channels, bn, stride),
    }
}

fn cast_path<T: Real>(p: &Path<T>) -> Path<f64> {
    let c = |cb: &ConvBn<T>| ConvBn { conv: cb.conv.cast(), bn: cb.bn.as_ref().map(BatchNorm::cast) };
    match p {
        Path::Conv3x3Conv1x1 { first, second } => Path::Conv3x3Conv1x1 { first: c(first), second: c(second) },
        Path::Conv1x1Conv1x1 { first, second } => Path::Conv1x1Conv1x1 { first: c(first), second: c(second) },
        Path::Residual { bn } => Path::Residual { bn: bn.cast() },
    }
}

/// Reduces a training-form block to its single fused 3×3 convolution.
pub fn contract_gcblock<T: Real>(b: &GcBlock<T>) -> Result<GcBlock<T>> {
    let GcBlock::Training { spec, paths } = b else {
        return Err(Error::Form("block is already contracted".into()));
    };
    b.validate()?;
    let kernels = paths
        .iter()
        .map(|p| path_to_conv3x3(&cast_path(p), spec.out_channels, spec.stride))
        .collect::<Result<Vec<_>>>()?;
    let fused = sum_parallel(&kernels)?;
    Ok(GcBlock::Inference { spec: *spec, fused: fused.cast() })
}

/// A conv-BN pair with the batch norm folded away.
pub fn fold_conv_bn<T: Real>(cb: &ConvBn<T>) -> Result<ConvBn<T>> {
    Ok(match &cb.bn {
        Some(bn) => ConvBn::plain(fuse_conv_bn(&cb.conv.cast::<f64>(), &bn.cast())?.cast()),
        None => cb.clone(),
    })
}

fn fold_all<T: Real>(v: &[ConvBn<T>]) -> Result<Vec<ConvBn<T>>> {
    v.iter().map(fold_conv_bn).collect()
}

fn fold_fusion<T: Real>(f: &FusionModule<T>) -> Result<FusionModule<T>> {
    Ok(FusionModule { direction: f.direction, convs: fold_all(&f.convs)? })
}

type BlockMap<T> = fn(&GcBlock<T>) -> Result<GcBlock<T>>;

fn contract_stage<T: Real>(blocks: &[GcBlock<T>], f: BlockMap<T>) -> Result<Vec<GcBlock<T>>> {
    blocks.iter().map(f).collect()
}

/// Produces the inference form of a network: every block contracted, every
/// batch norm folded into its convolution, auxiliary head dropped. The input
/// is left untouched.
pub fn contract_network<T: Real>(net: &Network<T>) -> Result<Network<T>> {
    contract_network_with(net, contract_gcblock)
}

/// Inference-form layout with zero block kernels, skipping the arithmetic.
pub(crate) fn zeroed_inference_layout<T: Real>(net: &Network<T>) -> Result<Network<T>> {
    contract_network_with(net, |b| GcBlock::zeroed_inference(b.spec()))
}

fn contract_network_with<T: Real>(net: &Network<T>, f: BlockMap<T>) -> Result<Network<T>> {
    if net.form != Form::Training {
        return Err(Error::Form("network is already in inference form".into()));
    }
    let ppm = match &net.ppm {
        PyramidPooling::Dappm { scales, process, compression, shortcut } => PyramidPooling::Dappm {
            scales: fold_all(scales)?,
            process: fold_all(process)?,
            compression: fold_conv_bn(compression)?,
            shortcut: fold_conv_bn(shortcut)?,
        },
        PyramidPooling::Global { pooled, local, fuse } => {
            PyramidPooling::Global { pooled: fold_conv_bn(pooled)?, local: fold_conv_bn(local)?, fuse: fold_conv_bn(fuse)? }
        }
    };
    let head = |h: &SegHead<T>| -> Result<SegHead<T>> { Ok(SegHead { conv3x3: fold_conv_bn(&h.conv3x3)?, conv1x1: h.conv1x1.clone() }) };
    Ok(Network {
        cfg: net.cfg.clone(),
        form: Form::Inference,
        stem: fold_all(&net.stem)?,
        s2: contract_stage(&net.s2, f)?,
        s3: contract_stage(&net.s3, f)?,
        s4_sem: contract_stage(&net.s4_sem, f)?,
        s4_det: contract_stage(&net.s4_det, f)?,
        fuse4_s2d: fold_fusion(&net.fuse4_s2d)?,
        fuse4_d2s: fold_fusion(&net.fuse4_d2s)?,
        s5_sem: contract_stage(&net.s5_sem, f)?,
        s5_det: contract_stage(&net.s5_det, f)?,
        fuse5_s2d: fold_fusion(&net.fuse5_s2d)?,
        fuse5_d2s: fold_fusion(&net.fuse5_d2s)?,
        s6_sem: contract_stage(&net.s6_sem, f)?,
        s6_det: contract_stage(&net.s6_det, f)?,
        ppm,
        head: head(&net.head)?,
        aux_head: None,
    })
}
