//! Reverse-mode differentiation over the [`Exec`] forward graph.
//!
//! Parameters are not tape nodes. Each convolution and batch-norm node keeps
//! a borrow of the struct it read, and the backward pass returns gradients
//! keyed by that struct's [`ParamKey`].

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, shape_err};
use crate::exec::{batch_norm_batch, Exec, ParamKey};
use crate::ops::{self, BatchNorm, BatchStats, ConvKernel, Mode};
use crate::{Dims, Real, Result, Tensor4};

pub type NodeId = usize;

enum Op<'a, T> {
    Leaf,
    Conv { x: NodeId, k: &'a ConvKernel<T> },
    BnTrain { x: NodeId, bn: &'a BatchNorm<T>, stats: BatchStats<T> },
    BnEval { x: NodeId, bn: &'a BatchNorm<T> },
    Relu { x: NodeId },
    Add { a: NodeId, b: NodeId },
    Resize { x: NodeId },
    AvgPool { x: NodeId, kernel: usize, stride: usize, pad: usize },
    GlobalPool { x: NodeId },
    Concat { parts: Vec<NodeId> },
}

struct Node<'a, T> {
    value: Tensor4<T>,
    op: Op<'a, T>,
}

/// Recording executor. Batch norm runs in the tape's [`Mode`].
pub struct Tape<'a, T> {
    nodes: Vec<Node<'a, T>>,
    mode: Mode,
}

#[derive(Debug, Clone, Default)]
pub struct ConvGrad<T> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

#[derive(Debug, Clone, Default)]
pub struct BnGrad<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

/// Result of [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub conv: BTreeMap<ParamKey, ConvGrad<T>>,
    pub bn: BTreeMap<ParamKey, BnGrad<T>>,
    leaves: BTreeMap<NodeId, Tensor4<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn conv(&self, k: &ConvKernel<T>) -> Option<&ConvGrad<T>> {
        self.conv.get(&ParamKey::of(k))
    }

    pub fn bn(&self, bn: &BatchNorm<T>) -> Option<&BnGrad<T>> {
        self.bn.get(&ParamKey::of(bn))
    }

    /// Gradient reaching a leaf created with [`Tape::leaf`].
    pub fn leaf(&self, id: NodeId) -> Option<&Tensor4<T>> {
        self.leaves.get(&id)
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor4<T>>, g: Tensor4<T>) -> Result<()> {
    match slot {
        Some(acc) => ops::add_assign(acc, &g),
        None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

fn add_into<T: Real>(dst: &mut Vec<T>, src: &[T]) {
    if dst.is_empty() {
        dst.extend_from_slice(src);
    } else {
        for (d, s) in dst.iter_mut().zip(src) {
            *d += *s;
        }
    }
}

impl<'a, T: Real> Tape<'a, T> {
    pub fn new(mode: Mode) -> Self {
        Tape { nodes: Vec::new(), mode }
    }

    pub fn leaf(&mut self, value: Tensor4<T>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor4<T> {
        &self.nodes[id].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Batch statistics seen by every train-mode batch norm, in forward order.
    pub fn bn_stats(&self) -> Vec<(ParamKey, BatchStats<T>)> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::BnTrain { bn, stats, .. } => Some((ParamKey::of(*bn), stats.clone())),
                _ => None,
            })
            .collect()
    }

    fn push(&mut self, value: Tensor4<T>, op: Op<'a, T>) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    /// Propagates the given output gradients back through the graph.
    pub fn backward(&self, seeds: &[(NodeId, Tensor4<T>)]) -> Result<Gradients<T>> {
        let mut grads: Vec<Option<Tensor4<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (id, g) in seeds {
            let node = self.nodes.get(*id).ok_or_else(|| invalid!("seed node {id} not on tape"))?;
            if node.value.dims() != g.dims() {
                return Err(shape_err!("seed gradient {} != node value {}", g.dims(), node.value.dims()));
            }
            accumulate(&mut grads[*id], g.clone())?;
        }
        let mut out = Gradients { conv: BTreeMap::new(), bn: BTreeMap::new(), leaves: BTreeMap::new() };
        for id in (0..self.nodes.len()).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {
                    out.leaves.insert(id, g);
                }
                Op::Conv { x, k } => {
                    let cg = ops::conv2d_backward(&self.nodes[*x].value, k, &g)?;
                    let e = out.conv.entry(ParamKey::of(*k)).or_default();
                    add_into(&mut e.weight, &cg.weight);
                    add_into(&mut e.bias, &cg.bias);
                    accumulate(&mut grads[*x], cg.input)?;
                }
                Op::BnTrain { x, bn, stats } => {
                    let (dx, dg, db) = ops::batch_norm_train_backward(&self.nodes[*x].value, stats, bn, &g)?;
                    let e = out.bn.entry(ParamKey::of(*bn)).or_default();
                    add_into(&mut e.gamma, &dg);
                    add_into(&mut e.beta, &db);
                    accumulate(&mut grads[*x], dx)?;
                }
                Op::BnEval { x, bn } => {
                    let xv = &self.nodes[*x].value;
                    let d = xv.dims();
                    let mut dx = g.clone();
                    let mut dg = vec![T::zero(); d.c];
                    let mut db = vec![T::zero(); d.c];
                    for c in 0..d.c {
                        let inv = T::one() / (bn.var[c] + bn.eps).sqrt();
                        for n in 0..d.n {
                            for ((gi, xi), dxi) in g.plane(n, c).iter().zip(xv.plane(n, c)).zip(dx.plane_mut(n, c)) {
                                dg[c] += *gi * (*xi - bn.mean[c]) * inv;
                                db[c] += *gi;
                                *dxi = *gi * bn.gamma[c] * inv;
                            }
                        }
                    }
                    let e = out.bn.entry(ParamKey::of(*bn)).or_default();
                    add_into(&mut e.gamma, &dg);
                    add_into(&mut e.beta, &db);
                    accumulate(&mut grads[*x], dx)?;
                }
                Op::Relu { x } => accumulate(&mut grads[*x], ops::relu_backward(&node.value, &g))?,
                Op::Add { a, b } => {
                    accumulate(&mut grads[*b], g.clone())?;
                    accumulate(&mut grads[*a], g)?;
                }
                Op::Resize { x } => {
                    let dx = ops::bilinear_resize_backward(&g, self.nodes[*x].value.dims())?;
                    accumulate(&mut grads[*x], dx)?;
                }
                Op::AvgPool { x, kernel, stride, pad } => {
                    let dx = ops::avg_pool_backward(&g, self.nodes[*x].value.dims(), *kernel, *stride, *pad)?;
                    accumulate(&mut grads[*x], dx)?;
                }
                Op::GlobalPool { x } => {
                    let dx = ops::global_avg_pool_backward(&g, self.nodes[*x].value.dims());
                    accumulate(&mut grads[*x], dx)?;
                }
                Op::Concat { parts } => {
                    let widths: Vec<usize> = parts.iter().map(|p| self.nodes[*p].value.dims().c).collect();
                    for (p, gp) in parts.iter().zip(ops::split_channels(&g, &widths)?) {
                        accumulate(&mut grads[*p], gp)?;
                    }
                }
            }
        }
        Ok(out)
    }
}

impl<'a, T: Real> Exec<'a, T> for Tape<'a, T> {
    type Value = NodeId;

    fn dims(&self, v: &NodeId) -> Dims {
        self.nodes[*v].value.dims()
    }

    fn conv(&mut self, x: &NodeId, k: &'a ConvKernel<T>) -> Result<NodeId> {
        let y = ops::conv2d(&self.nodes[*x].value, k)?;
        Ok(self.push(y, Op::Conv { x: *x, k }))
    }

    fn batch_norm(&mut self, x: &NodeId, bn: &'a BatchNorm<T>) -> Result<NodeId> {
        let xv = &self.nodes[*x].value;
        match self.mode {
            Mode::Train => {
                let (y, stats) = batch_norm_batch(xv, bn)?;
                Ok(self.push(y, Op::BnTrain { x: *x, bn, stats }))
            }
            Mode::Eval => {
                let y = ops::batch_norm_eval(xv, bn)?;
                Ok(self.push(y, Op::BnEval { x: *x, bn }))
            }
        }
    }

    fn relu(&mut self, x: &NodeId) -> NodeId {
        let y = ops::relu(&self.nodes[*x].value);
        self.push(y, Op::Relu { x: *x })
    }

    fn add(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        let y = ops::add(&self.nodes[*a].value, &self.nodes[*b].value)?;
        Ok(self.push(y, Op::Add { a: *a, b: *b }))
    }

    fn resize(&mut self, x: &NodeId, h: usize, w: usize) -> Result<NodeId> {
        let y = ops::bilinear_resize(&self.nodes[*x].value, h, w)?;
        Ok(self.push(y, Op::Resize { x: *x }))
    }

    fn avg_pool(&mut self, x: &NodeId, kernel: usize, stride: usize, pad: usize) -> Result<NodeId> {
        let y = ops::avg_pool(&self.nodes[*x].value, kernel, stride, pad)?;
        Ok(self.push(y, Op::AvgPool { x: *x, kernel, stride, pad }))
    }

    fn global_avg_pool(&mut self, x: &NodeId) -> NodeId {
        let y = ops::global_avg_pool(&self.nodes[*x].value);
        self.push(y, Op::GlobalPool { x: *x })
    }

    fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let refs: Vec<&Tensor4<T>> = parts.iter().map(|p| &self.nodes[*p].value).collect();
        let y = ops::concat_channels(&refs)?;
        Ok(self.push(y, Op::Concat { parts: parts.to_vec() }))
    }
}
