mod common;

use common::*;
use gcnet_core::blocks::{gcblock_forward, BlockSpec, ConvBn, GcBlock, Path};
use gcnet_core::ops::{batch_norm_eval, conv2d, conv2d_direct, relu, BatchNorm, ConvKernel, Mode};
use gcnet_core::reparam::*;
use gcnet_core::{Dims, Tensor4};
use proptest::prelude::*;

fn ident_bn(c: usize) -> BatchNorm<f64> {
    BatchNorm::identity(c)
}

#[test]
fn fuse_with_identity_bn_is_noop() {
    let mut r = rng(1);
    let k = random_conv::<f64>(3, 2, 3, 1, 1, &mut r);
    let f = fuse_conv_bn(&k, &ident_bn(3)).unwrap();
    assert!(f.weight.max_abs_diff(&k.weight).unwrap() < 1e-15);
    for (a, b) in f.bias.iter().zip(&k.bias) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn fuse_with_zero_gamma_collapses_to_beta() {
    let mut r = rng(2);
    let k = random_conv::<f64>(3, 2, 3, 1, 1, &mut r);
    let mut bn = random_bn::<f64>(3, &mut r);
    bn.gamma.fill(0.0);
    let f = fuse_conv_bn(&k, &bn).unwrap();
    assert!(f.weight.data().iter().all(|&w| w == 0.0));
    assert_eq!(f.bias, bn.beta);
}

#[test]
fn fuse_matches_sequential_conv_then_bn() {
    let mut r = rng(3);
    let k = random_conv::<f64>(4, 3, 3, 1, 1, &mut r);
    let bn = random_bn::<f64>(4, &mut r);
    let x = randn::<f64>(Dims::new(1, 3, 6, 6), &mut r);
    let seq = batch_norm_eval(&conv2d(&x, &k).unwrap(), &bn).unwrap();
    let fused = conv2d(&x, &fuse_conv_bn(&k, &bn).unwrap()).unwrap();
    assert!(max_rel(&seq, &fused) < 1e-11);
    assert!(fuse_conv_bn(&k, &ident_bn(5)).is_err());
}

#[test]
fn merge_with_identity_second_stage_returns_first() {
    let mut r = rng(4);
    let first = random_conv::<f64>(3, 2, 3, 2, 1, &mut r);
    let m = merge_sequential(&first, &ConvKernel::identity_1x1(3)).unwrap();
    assert_eq!(m, first);
}

#[test]
fn merge_scalar_case() {
    let mut r = rng(5);
    let first = random_conv::<f64>(1, 1, 3, 1, 1, &mut r);
    let mut second = ConvKernel::<f64>::zeros(1, 1, 1, 1, 0);
    second.weight.data_mut()[0] = 2.0;
    second.bias[0] = 1.0;
    let m = merge_sequential(&first, &second).unwrap();
    assert_eq!(m.weight, first.weight.scale(2.0));
    assert_eq!(m.bias[0], 2.0 * first.bias[0] + 1.0);
}

#[test]
fn merge_matches_two_stage_evaluation() {
    let mut r = rng(6);
    let first = random_conv::<f64>(3, 2, 3, 1, 1, &mut r);
    let second = random_conv::<f64>(2, 3, 1, 1, 0, &mut r);
    let x = randn::<f64>(Dims::new(1, 2, 7, 7), &mut r);
    let two = conv2d(&conv2d(&x, &first).unwrap(), &second).unwrap();
    let one = conv2d(&x, &merge_sequential(&first, &second).unwrap()).unwrap();
    assert!(max_rel(&two, &one) < 1e-11);
}

#[test]
fn merge_rejects_bad_second_stage() {
    let mut r = rng(7);
    let first = random_conv::<f64>(3, 2, 3, 1, 1, &mut r);
    assert!(merge_sequential(&first, &random_conv::<f64>(2, 3, 3, 1, 1, &mut r)).is_err());
    assert!(merge_sequential(&first, &random_conv::<f64>(2, 3, 1, 2, 0, &mut r)).is_err());
    assert!(merge_sequential(&first, &random_conv::<f64>(2, 4, 1, 1, 0, &mut r)).is_err());
}

#[test]
fn merging_refuses_attached_batch_norm() {
    let mut r = rng(8);
    let a = ConvBn { conv: random_conv::<f64>(3, 2, 3, 1, 1, &mut r), bn: Some(random_bn(3, &mut r)) };
    let b = ConvBn { conv: random_conv::<f64>(3, 3, 1, 1, 0, &mut r), bn: Some(random_bn(3, &mut r)) };
    assert!(merge_stages(&a, &b).is_err());
    let fa = fold_conv_bn(&a).unwrap();
    assert!(merge_stages(&fa, &b).is_err());
    let fb = fold_conv_bn(&b).unwrap();
    let merged = merge_stages(&fa, &fb).unwrap();
    let x = randn::<f64>(Dims::new(1, 2, 5, 5), &mut r);
    let seq = batch_norm_eval(
        &conv2d(&batch_norm_eval(&conv2d(&x, &a.conv).unwrap(), a.bn.as_ref().unwrap()).unwrap(), &b.conv).unwrap(),
        b.bn.as_ref().unwrap(),
    )
    .unwrap();
    assert!(max_rel(&seq, &conv2d(&x, &merged).unwrap()) < 1e-11);
}

#[test]
fn embedding_is_exact_at_both_strides() {
    let mut r = rng(9);
    for stride in [1, 2] {
        let k = random_conv::<f64>(3, 2, 1, stride, 0, &mut r);
        let e = embed_1x1_in_3x3(&k).unwrap();
        assert_eq!((e.k(), e.padding, e.stride), (3, 1, stride));
        let x = randn::<f64>(Dims::new(1, 2, 5, 5), &mut r);
        let a = conv2d_direct(&x, &k).unwrap();
        let b = conv2d_direct(&x, &e).unwrap();
        assert_eq!(a.dims(), b.dims());
        assert_eq!(a, b);
        assert_eq!(conv2d(&x, &k).unwrap(), conv2d(&x, &e).unwrap());
    }
    let mut one = ConvKernel::<f64>::zeros(1, 1, 1, 1, 0);
    one.weight.data_mut()[0] = 1.0;
    let x = randn::<f64>(Dims::new(1, 1, 4, 3), &mut r);
    assert_eq!(conv2d(&x, &embed_1x1_in_3x3(&one).unwrap()).unwrap(), x);
    assert!(embed_1x1_in_3x3(&random_conv::<f64>(1, 1, 3, 1, 1, &mut r)).is_err());
}

#[test]
fn residual_conversion() {
    let mut r = rng(10);
    let x = randn::<f64>(Dims::new(1, 4, 6, 6), &mut r);
    let id = residual_to_conv3x3(4, &ident_bn(4), 1).unwrap();
    assert!(conv2d(&x, &id).unwrap().max_abs_diff(&x).unwrap() < 1e-15);

    let mut bn = BatchNorm::<f64>::new(4);
    bn.gamma.fill(0.0);
    bn.beta.fill(5.0);
    let c = conv2d(&x, &residual_to_conv3x3(4, &bn, 1).unwrap()).unwrap();
    assert!(c.data().iter().all(|&v| v == 5.0));

    let bn = random_bn::<f64>(4, &mut r);
    let k = residual_to_conv3x3(4, &bn, 1).unwrap();
    assert!(max_rel(&conv2d(&x, &k).unwrap(), &batch_norm_eval(&x, &bn).unwrap()) < 1e-11);
    assert!(residual_to_conv3x3(4, &bn, 2).is_err());
}

#[test]
fn parallel_sums() {
    let mut r = rng(11);
    let k = random_conv::<f64>(3, 2, 3, 1, 1, &mut r);
    assert_eq!(sum_parallel(std::slice::from_ref(&k)).unwrap(), k);
    let d = sum_parallel(&[k.clone(), k.clone()]).unwrap();
    assert_eq!(d.weight, k.weight.scale(2.0));
    assert_eq!(d.bias, k.bias.iter().map(|b| 2.0 * b).collect::<Vec<_>>());

    let ks: Vec<_> = (0..5).map(|_| random_conv::<f64>(3, 2, 3, 1, 1, &mut r)).collect();
    let x = randn::<f64>(Dims::new(1, 2, 7, 6), &mut r);
    let mut want = Tensor4::zeros(Dims::new(1, 3, 7, 6));
    for k in &ks {
        gcnet_core::ops::add_assign(&mut want, &conv2d(&x, k).unwrap()).unwrap();
    }
    assert!(max_rel(&want, &conv2d(&x, &sum_parallel(&ks).unwrap()).unwrap()) < 1e-11);

    assert!(sum_parallel::<f64>(&[]).is_err());
    assert!(sum_parallel(&[k.clone(), random_conv(3, 2, 3, 2, 1, &mut r)]).is_err());
    assert!(sum_parallel(&[k, random_conv(3, 3, 3, 1, 1, &mut r)]).is_err());
}

#[test]
fn residual_only_block_contracts_to_identity() {
    let spec = BlockSpec::new(3, 3, 1, 2);
    let mut b = GcBlock::<f64>::new(spec, &mut gcnet_core::blocks::Init::Zeros).unwrap();
    if let GcBlock::Training { paths, .. } = &mut b {
        for p in paths.iter_mut() {
            match p {
                Path::Conv3x3Conv1x1 { first, second } | Path::Conv1x1Conv1x1 { first, second } => {
                    first.bn = Some(ident_bn(3));
                    second.bn = Some(ident_bn(3));
                }
                Path::Residual { bn } => *bn = ident_bn(3),
            }
        }
    }
    let c = contract_gcblock(&b).unwrap();
    let x = randn::<f64>(Dims::new(1, 3, 5, 4), &mut rng(12));
    let y = gcblock_forward(&c, &x, Mode::Eval).unwrap();
    assert!(y.max_abs_diff(&relu(&x)).unwrap() < 1e-15);
    assert!(contract_gcblock(&c).is_err());
}

fn block_equivalence(spec: BlockSpec, hw: (usize, usize), seed: u64) -> f64 {
    let b = random_block::<f64>(spec, seed);
    let c = contract_gcblock(&b).unwrap();
    let x = randn::<f64>(Dims::new(1, spec.in_channels, hw.0, hw.1), &mut rng(seed + 1));
    let a = gcblock_forward(&b, &x, Mode::Eval).unwrap();
    let z = gcblock_forward(&c, &x, Mode::Eval).unwrap();
    a.max_abs_diff(&z).unwrap()
}

#[test]
fn stride2_single_path_block_contracts() {
    assert!(block_equivalence(BlockSpec::new(8, 8, 2, 1), (16, 16), 13) <= 1e-9);
}

#[test]
fn gcnet_s_style_block_contracts() {
    assert!(block_equivalence(BlockSpec::new(32, 32, 1, 4), (16, 16), 14) <= 1e-9);
}

#[test]
fn contraction_rejects_malformed_paths() {
    let spec = BlockSpec::new(4, 4, 1, 2);
    let GcBlock::Training { mut paths, .. } = random_block::<f64>(spec, 15) else { unreachable!() };
    paths.swap(0, 2);
    assert!(GcBlock::training(spec, paths.clone()).is_err());
    paths.pop();
    assert!(GcBlock::training(spec, paths).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn contraction_is_lossless(
        c_in in 2usize..=16, c_out in 2usize..=16, n in 1usize..=5, stride in 1usize..=2,
        h in 4usize..=17, w in 4usize..=17, same in any::<bool>(), seed in any::<u64>(),
    ) {
        let c_out = if same { c_in } else { c_out };
        let spec = BlockSpec::new(c_in, c_out, stride, n);
        let b = random_block::<f64>(spec, seed);
        let c = contract_gcblock(&b).unwrap();
        let x = randn::<f64>(Dims::new(1, c_in, h, w), &mut rng(seed.wrapping_add(1)));
        let a = gcblock_forward(&b, &x, Mode::Eval).unwrap();
        let z = gcblock_forward(&c, &x, Mode::Eval).unwrap();
        prop_assert!(a.max_abs_diff(&z).unwrap() <= 1e-9);

        // the same weights in f32
        let b32 = random_block::<f32>(spec, seed);
        let c32 = contract_gcblock(&b32).unwrap();
        let x32 = x.cast::<f32>();
        let a32 = gcblock_forward(&b32, &x32, Mode::Eval).unwrap().cast::<f64>();
        let z32 = gcblock_forward(&c32, &x32, Mode::Eval).unwrap().cast::<f64>();
        prop_assert!(max_rel(&a32, &z32) <= 1e-3);

        // argmax of a 1x1 readout agrees wherever the decision is not a near tie
        let classes = 5;
        let readout = random_conv::<f64>(classes, c_out, 1, 1, 0, &mut rng(seed ^ 0x5ead));
        let la = conv2d(&a, &readout).unwrap();
        let lz = conv2d(&z, &readout).unwrap();
        let d = la.dims();
        for i in 0..d.h * d.w {
            let mut v: Vec<(f64, usize)> = (0..classes).map(|k| (la.plane(0, k)[i], k)).collect();
            v.sort_by(|p, q| q.0.total_cmp(&p.0));
            if v[0].0 - v[1].0 > 1e-6 {
                let best_z = (0..classes).max_by(|&p, &q| lz.plane(0, p)[i].total_cmp(&lz.plane(0, q)[i])).unwrap();
                prop_assert_eq!(v[0].1, best_z);
            }
        }
    }

    #[test]
    fn sum_parallel_is_permutation_invariant(seed in any::<u64>(), n in 1usize..=6, perm_seed in any::<u64>()) {
        let mut r = rng(seed);
        let ks: Vec<_> = (0..n).map(|_| random_conv::<f64>(3, 2, 3, 1, 1, &mut r)).collect();
        let mut shuffled = ks.clone();
        use rand::seq::SliceRandom;
        shuffled.shuffle(&mut rng(perm_seed));
        let a = sum_parallel(&ks).unwrap();
        let b = sum_parallel(&shuffled).unwrap();
        prop_assert_eq!(a.weight.data(), b.weight.data());
        prop_assert_eq!(a.bias, b.bias);
    }
}
