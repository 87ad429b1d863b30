//! Analytic gradients against central finite differences (f64, step 1e-5).

mod common;

use common::*;
use gcnet_core::autograd::{Gradients, Tape};
use gcnet_core::blocks::{BlockSpec, GcBlock, HasParams, ParamMut, ParamRef};
use gcnet_core::exec::{Eager, Exec};
use gcnet_core::network::{Network, NetworkConfig, Variant};
use gcnet_core::ops::{BatchNorm, ConvKernel, LabelMap, Mode};
use gcnet_core::train::{backward, ohem_cross_entropy, ohem_cross_entropy_grad, total_loss, MinKept, OhemConfig, IGNORE_LABEL};
use gcnet_core::{Dims, Tensor4};
use rand::seq::index::sample;
use rand::Rng;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-3;
const SAMPLES: usize = 50;

/// Relative error. The 1e-6 floor on the denominator keeps gradients that
/// are zero up to finite-difference round-off from reading as failures.
fn rel(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn dot(a: &Tensor4<f64>, b: &Tensor4<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Central difference of `f` with respect to `v[i]`.
fn central(v: &mut [f64], i: usize, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let orig = v[i];
    v[i] = orig + STEP;
    let up = f(v);
    v[i] = orig - STEP;
    let down = f(v);
    v[i] = orig;
    (up - down) / (2.0 * STEP)
}

fn pick(len: usize, seed: u64) -> Vec<usize> {
    let mut r = rng(seed);
    sample(&mut r, len, SAMPLES.min(len)).into_vec()
}

struct Report {
    checked: usize,
    worst: f64,
}

impl Report {
    fn new() -> Self {
        Report { checked: 0, worst: 0.0 }
    }

    fn push(&mut self, analytic: f64, numeric: f64) {
        self.checked += 1;
        self.worst = self.worst.max(rel(analytic, numeric));
    }

    fn assert(&self, what: &str, min: usize) {
        assert!(self.checked >= min, "{what}: only {} samples", self.checked);
        assert!(self.worst <= TOL, "{what}: worst relative error {:e}", self.worst);
    }
}

fn input_report<'a>(
    x: &Tensor4<f64>,
    seed: u64,
    tape_fn: impl Fn(&mut Tape<'a, f64>, usize) -> usize,
    eager_fn: impl Fn(&Tensor4<f64>) -> Tensor4<f64>,
) -> Report {
    let mut tape = Tape::new(Mode::Train);
    let id = tape.leaf(x.clone());
    let out = tape_fn(&mut tape, id);
    let r = randn::<f64>(tape.value(out).dims(), &mut rng(seed));
    let grads = tape.backward(&[(out, r.clone())]).unwrap();
    let gx = grads.leaf(id).unwrap().clone();
    let mut report = Report::new();
    let mut data = x.data().to_vec();
    for i in pick(data.len(), seed + 1) {
        let n = central(&mut data, i, |v| dot(&eager_fn(&Tensor4::from_vec(x.dims(), v.to_vec()).unwrap()), &r));
        report.push(gx.data()[i], n);
    }
    report
}

fn eager_train() -> Eager<f64> {
    Eager::new(Mode::Train)
}

#[test]
fn conv_weights_bias_and_input() {
    let mut g = rng(1);
    for (c_out, c_in, stride, pad, k) in [(4, 3, 1, 1, 3), (4, 3, 2, 1, 3), (8, 7, 2, 0, 1)] {
        let kernel = random_conv::<f64>(c_out, c_in, k, stride, pad, &mut g);
        let x = randn::<f64>(Dims::new(2, c_in, 7, 6), &mut g);
        let mut tape = Tape::new(Mode::Train);
        let id = tape.leaf(x.clone());
        let out = tape.conv(&id, &kernel).unwrap();
        let r = randn::<f64>(tape.value(out).dims(), &mut g);
        let grads = tape.backward(&[(out, r.clone())]).unwrap();
        let cg = grads.conv(&kernel).unwrap();

        let loss = |k: &ConvKernel<f64>| dot(&eager_train().conv(&x, k).unwrap(), &r);
        let mut rep = Report::new();
        let mut w = kernel.weight.data().to_vec();
        for i in pick(w.len(), 2) {
            let n = central(&mut w, i, |v| {
                let mut k2 = kernel.clone();
                k2.weight.data_mut().copy_from_slice(v);
                loss(&k2)
            });
            rep.push(cg.weight[i], n);
        }
        let mut b = kernel.bias.clone();
        for i in 0..b.len() {
            let n = central(&mut b, i, |v| {
                let mut k2 = kernel.clone();
                k2.bias.copy_from_slice(v);
                loss(&k2)
            });
            rep.push(cg.bias[i], n);
        }
        rep.assert("conv params", SAMPLES);

        let rep = input_report(&x, 3, |t, id| t.conv(&id, &kernel).unwrap(), |x| eager_train().conv(x, &kernel).unwrap());
        rep.assert("conv input", SAMPLES);
    }
}

#[test]
fn batch_norm_train_mode() {
    let mut g = rng(10);
    let bn = random_bn::<f64>(8, &mut g);
    let x = randn::<f64>(Dims::new(3, 8, 3, 4), &mut g).map(|v| 2.0 * v + 0.5);
    let mut tape = Tape::new(Mode::Train);
    let id = tape.leaf(x.clone());
    let out = tape.batch_norm(&id, &bn).unwrap();
    let r = randn::<f64>(x.dims(), &mut g);
    let grads = tape.backward(&[(out, r.clone())]).unwrap();
    let bg = grads.bn(&bn).unwrap();
    let loss = |bn: &BatchNorm<f64>| dot(&eager_train().batch_norm(&x, bn).unwrap(), &r);

    let mut rep = Report::new();
    let mut gamma = bn.gamma.clone();
    for i in 0..gamma.len() {
        let n = central(&mut gamma, i, |v| loss(&BatchNorm { gamma: v.to_vec(), ..bn.clone() }));
        rep.push(bg.gamma[i], n);
    }
    let mut beta = bn.beta.clone();
    for i in 0..beta.len() {
        let n = central(&mut beta, i, |v| loss(&BatchNorm { beta: v.to_vec(), ..bn.clone() }));
        rep.push(bg.beta[i], n);
    }
    let inp = input_report(&x, 11, |t, id| t.batch_norm(&id, &bn).unwrap(), |x| eager_train().batch_norm(x, &bn).unwrap());
    rep.checked += inp.checked;
    rep.worst = rep.worst.max(inp.worst);
    rep.assert("batch norm (train)", SAMPLES);
}

#[test]
fn relu_input() {
    // keep samples away from the kink
    let x = randn::<f64>(Dims::new(2, 3, 5, 5), &mut rng(20)).map(|v| if v.abs() < 1e-3 { 0.5 } else { v });
    input_report(&x, 21, |t, id| t.relu(&id), |x| eager_train().relu(x)).assert("relu", SAMPLES);
}

#[test]
fn bilinear_up_and_down() {
    let x = randn::<f64>(Dims::new(2, 3, 5, 7), &mut rng(30));
    input_report(&x, 31, |t, id| t.resize(&id, 11, 9).unwrap(), |x| eager_train().resize(x, 11, 9).unwrap()).assert("bilinear up", SAMPLES);
    input_report(&x, 32, |t, id| t.resize(&id, 3, 2).unwrap(), |x| eager_train().resize(x, 3, 2).unwrap()).assert("bilinear down", SAMPLES);
}

#[test]
fn average_pooling() {
    let x = randn::<f64>(Dims::new(1, 3, 9, 10), &mut rng(40));
    for (k, s, p) in [(5, 2, 2), (9, 4, 4), (3, 3, 0)] {
        input_report(&x, 41, |t, id| t.avg_pool(&id, k, s, p).unwrap(), |x| eager_train().avg_pool(x, k, s, p).unwrap())
            .assert("avg pool", SAMPLES);
    }
    input_report(&x, 42, |t, id| t.global_avg_pool(&id), |x| eager_train().global_avg_pool(x)).assert("global pool", SAMPLES);
}

#[test]
fn concat_and_add() {
    let x = randn::<f64>(Dims::new(1, 3, 4, 5), &mut rng(45));
    input_report(
        &x,
        46,
        |t, id| {
            let r = t.relu(&id);
            let s = t.add(&id, &r).unwrap();
            t.concat(&[s, id, r]).unwrap()
        },
        |x| {
            let mut e = eager_train();
            let r = e.relu(x);
            let s = e.add(x, &r).unwrap();
            e.concat(&[s, x.clone(), r]).unwrap()
        },
    )
    .assert("concat/add", SAMPLES);
}

fn random_labels(n: usize, h: usize, w: usize, classes: u32, seed: u64) -> LabelMap {
    let mut g = rng(seed);
    let data = (0..n * h * w).map(|_| if g.random_bool(0.1) { IGNORE_LABEL } else { g.random_range(0..classes) }).collect();
    LabelMap::new(n, h, w, data).unwrap()
}

#[test]
fn ohem_cross_entropy_composite() {
    let mut g = rng(50);
    let kernel = random_conv::<f64>(5, 3, 3, 1, 1, &mut g);
    let x = randn::<f64>(Dims::new(2, 3, 4, 4), &mut g).scale(1.5);
    let labels = random_labels(2, 4, 4, 5, 51);
    let cfg = OhemConfig { thresh: 0.7, min_kept: MinKept::Count(8), ignore: IGNORE_LABEL };

    let mut tape = Tape::new(Mode::Train);
    let id = tape.leaf(x.clone());
    let out = tape.conv(&id, &kernel).unwrap();
    let (_, seed) = ohem_cross_entropy_grad(tape.value(out), &labels, &cfg).unwrap();
    let grads = tape.backward(&[(out, seed)]).unwrap();
    let cg = grads.conv(&kernel).unwrap();
    let gx = grads.leaf(id).unwrap();

    let loss = |k: &ConvKernel<f64>, x: &Tensor4<f64>| ohem_cross_entropy(&eager_train().conv(x, k).unwrap(), &labels, &cfg).unwrap();
    let mut rep = Report::new();
    let mut w = kernel.weight.data().to_vec();
    for i in pick(w.len(), 52) {
        let n = central(&mut w, i, |v| {
            let mut k2 = kernel.clone();
            k2.weight.data_mut().copy_from_slice(v);
            loss(&k2, &x)
        });
        rep.push(cg.weight[i], n);
    }
    let mut xs = x.data().to_vec();
    for i in pick(xs.len(), 53) {
        let n = central(&mut xs, i, |v| loss(&kernel, &Tensor4::from_vec(x.dims(), v.to_vec()).unwrap()));
        rep.push(gx.data()[i], n);
    }
    rep.assert("OHEM cross-entropy", SAMPLES);
}

/// Flat (leaf, slot, element) addresses of every trainable scalar.
fn addresses<P: HasParams<f64>>(p: &P) -> Vec<(usize, usize, usize)> {
    let mut leaves = Vec::new();
    p.params("", &mut leaves);
    let mut out = Vec::new();
    for (li, (_, leaf)) in leaves.iter().enumerate() {
        let (a, b) = match leaf {
            ParamRef::Conv(k) => (k.weight.data().len(), k.bias.len()),
            ParamRef::Bn(bn) => (bn.gamma.len(), bn.beta.len()),
        };
        out.extend((0..a).map(|i| (li, 0, i)));
        out.extend((0..b).map(|i| (li, 1, i)));
    }
    out
}

fn analytic<P: HasParams<f64>>(p: &P, grads: &Gradients<f64>, (li, slot, i): (usize, usize, usize)) -> f64 {
    let mut leaves = Vec::new();
    p.params("", &mut leaves);
    match &leaves[li].1 {
        ParamRef::Conv(k) => grads.conv(k).map_or(0.0, |g| if slot == 0 { g.weight[i] } else { g.bias[i] }),
        ParamRef::Bn(bn) => grads.bn(bn).map_or(0.0, |g| if slot == 0 { g.gamma[i] } else { g.beta[i] }),
    }
}

fn nudge<P: HasParams<f64>>(p: &mut P, (li, slot, i): (usize, usize, usize), delta: f64) {
    let mut leaves = Vec::new();
    p.params_mut("", &mut leaves);
    match &mut leaves[li].1 {
        ParamMut::Conv(k) if slot == 0 => k.weight.data_mut()[i] += delta,
        ParamMut::Conv(k) => k.bias[i] += delta,
        ParamMut::Bn(bn) if slot == 0 => bn.gamma[i] += delta,
        ParamMut::Bn(bn) => bn.beta[i] += delta,
    }
}

fn param_fd<P: HasParams<f64> + Clone>(p: &P, addr: (usize, usize, usize), loss: impl Fn(&P) -> f64) -> f64 {
    let (mut up, mut down) = (p.clone(), p.clone());
    nudge(&mut up, addr, STEP);
    nudge(&mut down, addr, -STEP);
    (loss(&up) - loss(&down)) / (2.0 * STEP)
}

#[test]
fn gcblock_with_two_paths() {
    for (spec, seed) in [(BlockSpec::new(4, 4, 1, 2), 60), (BlockSpec::new(3, 5, 2, 2), 61)] {
        let block = random_block::<f64>(spec, seed);
        let x = randn::<f64>(Dims::new(2, spec.in_channels, 6, 6), &mut rng(seed + 100));
        let mut tape = Tape::new(Mode::Train);
        let id = tape.leaf(x.clone());
        let out = block.forward(&mut tape, &id).unwrap();
        let r = randn::<f64>(tape.value(out).dims(), &mut rng(seed + 200));
        let grads = tape.backward(&[(out, r.clone())]).unwrap();

        let loss = |b: &GcBlock<f64>| dot(&b.forward(&mut eager_train(), &x).unwrap(), &r);
        let addrs = addresses(&block);
        let mut rep = Report::new();
        for i in pick(addrs.len(), seed + 300) {
            rep.push(analytic(&block, &grads, addrs[i]), param_fd(&block, addrs[i], loss));
        }
        rep.assert("GCBlock params", SAMPLES);
        let gx = grads.leaf(id).unwrap();
        let mut xs = x.data().to_vec();
        let mut inp = Report::new();
        for i in pick(xs.len(), seed + 400) {
            let n = central(&mut xs, i, |v| dot(&block.forward(&mut eager_train(), &Tensor4::from_vec(x.dims(), v.to_vec()).unwrap()).unwrap(), &r));
            inp.push(gx.data()[i], n);
        }
        inp.assert("GCBlock input", SAMPLES);
    }
}

#[test]
fn whole_network_loss() {
    let cfg = NetworkConfig::new(Variant::S, 3).with_base_channels(2).with_input(64, 64);
    let mut net = Network::<f64>::build(cfg, 70).unwrap();
    randomize(&mut net, &mut rng(71));
    let x = randn::<f64>(Dims::new(2, 3, 64, 64), &mut rng(72));
    let labels = random_labels(2, 64, 64, 3, 73);
    let ohem = OhemConfig::keep_all();
    let step = backward(&net, &x, &labels, &ohem, 0.4).unwrap();

    let loss = |n: &Network<f64>| {
        let out = n.forward_with(&mut eager_train(), &x, true).unwrap();
        total_loss(&out.logits, &out.aux.unwrap(), &labels, 0.4, &ohem).unwrap().total
    };
    assert!((loss(&net) - step.loss.total).abs() < 1e-12);
    let addrs = addresses(&net);
    let mut rep = Report::new();
    for i in pick(addrs.len(), 74) {
        let (a, n) = (analytic(&net, &step.grads, addrs[i]), param_fd(&net, addrs[i], loss));
        rep.push(a, n);
    }
    rep.assert("network", SAMPLES);
}
