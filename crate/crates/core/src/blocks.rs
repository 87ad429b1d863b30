//! Composite components: the reparameterizable block in both forms, bilateral
//! fusion between the two branches, pyramid pooling and segmentation heads.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, shape_err};
use crate::exec::{Eager, Exec};
use crate::ops::{BatchNorm, ConvKernel, Mode};
use crate::{Dims, Real, Result, Tensor4};

/// Weight initialization source.
#[derive(Debug)]
pub enum Init {
    /// Zero-mean Gaussian with standard deviation `sqrt(2 / fan_in)`, zero bias.
    He(ChaCha8Rng),
    /// All-zero weights, for skeletons that are filled in afterwards.
    Zeros,
}

impl Init {
    pub fn conv<T: Real>(&mut self, c_out: usize, c_in: usize, k: usize, stride: usize, padding: usize) -> ConvKernel<T> {
        let mut kernel = ConvKernel::zeros(c_out, c_in, k, stride, padding);
        if let Init::He(rng) = self {
            let std = libm::sqrt(2.0 / (c_in * k * k) as f64);
            let dist = Normal::new(0.0, std).expect("finite std");
            for w in kernel.weight.data_mut() {
                *w = T::of(dist.sample(rng));
            }
        }
        kernel
    }
}

/// A convolution optionally followed by batch norm (no activation).
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBn<T> {
    pub conv: ConvKernel<T>,
    pub bn: Option<BatchNorm<T>>,
}

impl<T: Real> ConvBn<T> {
    pub fn new(init: &mut Init, c_out: usize, c_in: usize, k: usize, stride: usize) -> Self {
        ConvBn { conv: init.conv(c_out, c_in, k, stride, k / 2), bn: Some(BatchNorm::new(c_out)) }
    }

    pub fn plain(conv: ConvKernel<T>) -> Self {
        ConvBn { conv, bn: None }
    }

    pub fn param_count(&self) -> usize {
        self.conv.param_count() + self.bn.as_ref().map_or(0, |bn| 2 * bn.channels())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathKind {
    Conv3x3Conv1x1,
    Conv1x1Conv1x1,
    Residual,
}

/// One parallel branch of a training-form block.
#[derive(Debug, Clone, PartialEq)]
pub enum Path<T> {
    /// 3×3 (carries the block stride, pad 1) then 1×1.
    Conv3x3Conv1x1 { first: ConvBn<T>, second: ConvBn<T> },
    /// 1×1 (carries the block stride) then 1×1.
    Conv1x1Conv1x1 { first: ConvBn<T>, second: ConvBn<T> },
    /// Batch norm applied to the block input.
    Residual { bn: BatchNorm<T> },
}

impl<T: Real> Path<T> {
    pub fn kind(&self) -> PathKind {
        match self {
            Path::Conv3x3Conv1x1 { .. } => PathKind::Conv3x3Conv1x1,
            Path::Conv1x1Conv1x1 { .. } => PathKind::Conv1x1Conv1x1,
            Path::Residual { .. } => PathKind::Residual,
        }
    }

    pub fn forward<'a, E: Exec<'a, T>>(&'a self, e: &mut E, x: &E::Value) -> Result<E::Value> {
        match self {
            Path::Conv3x3Conv1x1 { first, second } | Path::Conv1x1Conv1x1 { first, second } => {
                let y = e.conv_bn(x, first)?;
                e.conv_bn(&y, second)
            }
            Path::Residual { bn } => e.batch_norm(x, bn),
        }
    }
}

/// Geometry of a block: channels, stride and the number N of 3×3→1×1 paths.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub n_paths: usize,
}

impl BlockSpec {
    pub fn new(in_channels: usize, out_channels: usize, stride: usize, n_paths: usize) -> Self {
        BlockSpec { in_channels, out_channels, stride, n_paths }
    }

    /// The identity branch needs matching widths and no downsampling.
    pub fn has_residual(&self) -> bool {
        self.stride == 1 && self.in_channels == self.out_channels
    }

    /// Number of parallel paths in training form.
    pub fn path_count(&self) -> usize {
        self.n_paths + 1 + usize::from(self.has_residual())
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_paths == 0 {
            return Err(invalid!("a block needs at least one 3x3-1x1 path"));
        }
        if self.stride != 1 && self.stride != 2 {
            return Err(invalid!("block stride must be 1 or 2, got {}", self.stride));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(invalid!("block channels must be positive"));
        }
        Ok(())
    }
}

/// The reparameterizable block. Training form sums its paths and applies one
/// ReLU; inference form is a single 3×3 convolution followed by ReLU.
#[derive(Debug, Clone, PartialEq)]
pub enum GcBlock<T> {
    Training { spec: BlockSpec, paths: Vec<Path<T>> },
    Inference { spec: BlockSpec, fused: ConvKernel<T> },
}

fn expect_geometry<T: Real>(cb: &ConvBn<T>, c_out: usize, c_in: usize, k: usize, stride: usize, what: &str) -> Result<()> {
    let c = &cb.conv;
    if c.c_out() != c_out || c.c_in() != c_in || c.k() != k || c.stride != stride || c.padding != k / 2 {
        return Err(invalid!(
            "{what}: expected {c_in}->{c_out} {k}x{k} stride {stride} pad {}, got {}->{} {}x{} stride {} pad {}",
            k / 2,
            c.c_in(),
            c.c_out(),
            c.k(),
            c.k(),
            c.stride,
            c.padding
        ));
    }
    if let Some(bn) = &cb.bn {
        if bn.channels() != c_out {
            return Err(shape_err!("{what}: batch norm has {} channels, conv outputs {c_out}", bn.channels()));
        }
    }
    Ok(())
}

impl<T: Real> GcBlock<T> {
    /// Fresh training-form block.
    pub fn new(spec: BlockSpec, init: &mut Init) -> Result<Self> {
        spec.validate()?;
        let (i, o, s) = (spec.in_channels, spec.out_channels, spec.stride);
        let mut paths = Vec::with_capacity(spec.path_count());
        for _ in 0..spec.n_paths {
            paths.push(Path::Conv3x3Conv1x1 { first: ConvBn::new(init, o, i, 3, s), second: ConvBn::new(init, o, o, 1, 1) });
        }
        paths.push(Path::Conv1x1Conv1x1 { first: ConvBn::new(init, o, i, 1, s), second: ConvBn::new(init, o, o, 1, 1) });
        if spec.has_residual() {
            paths.push(Path::Residual { bn: BatchNorm::new(o) });
        }
        Ok(GcBlock::Training { spec, paths })
    }

    /// Inference-form block with an all-zero kernel.
    pub fn zeroed_inference(spec: BlockSpec) -> Result<Self> {
        spec.validate()?;
        let fused = ConvKernel::zeros(spec.out_channels, spec.in_channels, 3, spec.stride, 1);
        Ok(GcBlock::Inference { spec, fused })
    }

    /// Training-form block from explicit paths, checked against `spec`.
    pub fn training(spec: BlockSpec, paths: Vec<Path<T>>) -> Result<Self> {
        let b = GcBlock::Training { spec, paths };
        b.validate()?;
        Ok(b)
    }

    pub fn spec(&self) -> BlockSpec {
        match self {
            GcBlock::Training { spec, .. } | GcBlock::Inference { spec, .. } => *spec,
        }
    }

    pub fn is_training(&self) -> bool {
        matches!(self, GcBlock::Training { .. })
    }

    /// Checks that the path list has the shape its spec promises: N 3×3→1×1
    /// paths, then one 1×1→1×1 path, then the residual when applicable.
    pub fn validate(&self) -> Result<()> {
        let spec = self.spec();
        spec.validate()?;
        let (i, o, s) = (spec.in_channels, spec.out_channels, spec.stride);
        match self {
            GcBlock::Inference { fused, .. } => expect_geometry(&ConvBn::plain(fused.clone()), o, i, 3, s, "fused kernel"),
            GcBlock::Training { paths, .. } => {
                if paths.len() != spec.path_count() {
                    return Err(invalid!("block expects {} paths, got {}", spec.path_count(), paths.len()));
                }
                for (idx, p) in paths.iter().enumerate() {
                    let want = if idx < spec.n_paths {
                        PathKind::Conv3x3Conv1x1
                    } else if idx == spec.n_paths {
                        PathKind::Conv1x1Conv1x1
                    } else {
                        PathKind::Residual
                    };
                    if p.kind() != want {
                        return Err(invalid!("path {idx} should be {want:?}, found {:?}", p.kind()));
                    }
                    match p {
                        Path::Conv3x3Conv1x1 { first, second } => {
                            expect_geometry(first, o, i, 3, s, "3x3 stage")?;
                            expect_geometry(second, o, o, 1, 1, "1x1 stage")?;
                        }
                        Path::Conv1x1Conv1x1 { first, second } => {
                            expect_geometry(first, o, i, 1, s, "first 1x1 stage")?;
                            expect_geometry(second, o, o, 1, 1, "second 1x1 stage")?;
                        }
                        Path::Residual { bn } => {
                            if bn.channels() != o {
                                return Err(shape_err!("residual batch norm has {} channels, block has {o}", bn.channels()));
                            }
                        }
                    }
                }
                Ok(())
            }
        }
    }

    pub fn out_dims(&self, x: Dims) -> Result<Dims> {
        let spec = self.spec();
        if x.c != spec.in_channels {
            return Err(shape_err!("block expects {} channels, got {x}", spec.in_channels));
        }
        let len = |v: usize| (v + 2 - 3) / spec.stride + 1;
        Ok(Dims::new(x.n, spec.out_channels, len(x.h), len(x.w)))
    }

    pub fn forward<'a, E: Exec<'a, T>>(&'a self, e: &mut E, x: &E::Value) -> Result<E::Value> {
        let spec = self.spec();
        let d = e.dims(x);
        if d.c != spec.in_channels {
            return Err(shape_err!("block expects {} input channels, got {d}", spec.in_channels));
        }
        let sum = match self {
            GcBlock::Inference { fused, .. } => e.conv(x, fused)?,
            GcBlock::Training { paths, .. } => {
                let mut acc: Option<E::Value> = None;
                for p in paths {
                    let y = p.forward(e, x)?;
                    acc = Some(match acc {
                        None => y,
                        Some(a) => e.add(&a, &y)?,
                    });
                }
                acc.ok_or_else(|| invalid!("block has no paths"))?
            }
        };
        Ok(e.relu(&sum))
    }
}

pub fn gcblock_forward<T: Real>(b: &GcBlock<T>, x: &Tensor4<T>, mode: Mode) -> Result<Tensor4<T>> {
    b.forward(&mut Eager::new(mode), x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    SemanticToDetail,
    DetailToSemantic,
}

/// Projection carrying one branch's features into the other's shape.
///
/// Semantic→detail is a single 3×3 compression conv followed by bilinear
/// upsampling; detail→semantic is a chain of stride-2 3×3 convs with ReLU
/// between them (none after the last).
#[derive(Debug, Clone, PartialEq)]
pub struct FusionModule<T> {
    pub direction: Direction,
    pub convs: Vec<ConvBn<T>>,
}

impl<T: Real> FusionModule<T> {
    pub fn semantic_to_detail(init: &mut Init, sem_channels: usize, det_channels: usize) -> Self {
        FusionModule { direction: Direction::SemanticToDetail, convs: alloc::vec![ConvBn::new(init, det_channels, sem_channels, 3, 1)] }
    }

    /// `downsample` must be a power of two; one stride-2 conv per factor of 2,
    /// doubling width until the last conv lands on `sem_channels`.
    pub fn detail_to_semantic(init: &mut Init, det_channels: usize, sem_channels: usize, downsample: usize) -> Result<Self> {
        if !downsample.is_power_of_two() || downsample < 2 {
            return Err(invalid!("downsample factor must be a power of two >= 2"));
        }
        let steps = downsample.trailing_zeros() as usize;
        let mut convs = Vec::with_capacity(steps);
        let mut c = det_channels;
        for s in 0..steps {
            let out = if s + 1 == steps { sem_channels } else { c * 2 };
            convs.push(ConvBn::new(init, out, c, 3, 2));
            c = out;
        }
        Ok(FusionModule { direction: Direction::DetailToSemantic, convs })
    }

    pub fn project<'a, E: Exec<'a, T>>(&'a self, e: &mut E, x: &E::Value, target: Dims) -> Result<E::Value> {
        let first = self.convs.first().ok_or_else(|| invalid!("fusion module has no convolutions"))?;
        let y = match self.direction {
            Direction::SemanticToDetail => {
                let y = e.conv_bn(x, first)?;
                e.resize(&y, target.h, target.w)?
            }
            Direction::DetailToSemantic => {
                let mut y = x.clone();
                for (i, cb) in self.convs.iter().enumerate() {
                    y = e.conv_bn(&y, cb)?;
                    if i + 1 < self.convs.len() {
                        y = e.relu(&y);
                    }
                }
                y
            }
        };
        let got = e.dims(&y);
        if got != target {
            return Err(shape_err!("fusion projection produced {got}, receiving branch is {target}"));
        }
        Ok(y)
    }
}

/// Exchanges features between the branches. Both projections read the
/// pre-fusion inputs. Returns `(semantic, detail)`.
pub fn bilateral_fuse_with<'a, T: Real, E: Exec<'a, T>>(
    e: &mut E,
    sem: &E::Value,
    det: &E::Value,
    s2d: &'a FusionModule<T>,
    d2s: &'a FusionModule<T>,
) -> Result<(E::Value, E::Value)> {
    if s2d.direction != Direction::SemanticToDetail || d2s.direction != Direction::DetailToSemantic {
        return Err(invalid!("fusion modules passed in the wrong order"));
    }
    let (sd, dd) = (e.dims(sem), e.dims(det));
    let to_det = s2d.project(e, sem, dd)?;
    let to_sem = d2s.project(e, det, sd)?;
    let det2 = e.add(det, &to_det)?;
    let sem2 = e.add(sem, &to_sem)?;
    Ok((e.relu(&sem2), e.relu(&det2)))
}

pub fn bilateral_fuse<T: Real>(
    sem: &Tensor4<T>,
    det: &Tensor4<T>,
    s2d: &FusionModule<T>,
    d2s: &FusionModule<T>,
) -> Result<(Tensor4<T>, Tensor4<T>)> {
    bilateral_fuse_with(&mut Eager::eval(), sem, det, s2d, d2s)
}

/// Average-pool kernel, stride and padding of the three local DAPPM scales.
pub const DAPPM_POOLS: [(usize, usize, usize); 3] = [(5, 2, 2), (9, 4, 4), (17, 8, 8)];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PpmKind {
    /// Multi-scale pooling with hierarchical 3×3 aggregation.
    Dappm,
    /// One global-pool branch plus a local 1×1 branch.
    Global,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PyramidPooling<T> {
    /// `scales[0]` is the unpooled 1×1 branch, `scales[1..4]` follow
    /// [`DAPPM_POOLS`], `scales[4]` is global pooling; `process[i]` is the 3×3
    /// applied after adding scale `i+1` to the previous level.
    Dappm { scales: Vec<ConvBn<T>>, process: Vec<ConvBn<T>>, compression: ConvBn<T>, shortcut: ConvBn<T> },
    Global { pooled: ConvBn<T>, local: ConvBn<T>, fuse: ConvBn<T> },
}

impl<T: Real> PyramidPooling<T> {
    pub fn new(kind: PpmKind, init: &mut Init, in_c: usize, branch: usize, out_c: usize) -> Self {
        match kind {
            PpmKind::Dappm => PyramidPooling::Dappm {
                scales: (0..5).map(|_| ConvBn::new(init, branch, in_c, 1, 1)).collect(),
                process: (0..4).map(|_| ConvBn::new(init, branch, branch, 3, 1)).collect(),
                compression: ConvBn::new(init, out_c, 5 * branch, 1, 1),
                shortcut: ConvBn::new(init, out_c, in_c, 1, 1),
            },
            PpmKind::Global => PyramidPooling::Global {
                pooled: ConvBn::new(init, branch, in_c, 1, 1),
                local: ConvBn::new(init, branch, in_c, 1, 1),
                fuse: ConvBn::new(init, out_c, branch, 3, 1),
            },
        }
    }

    pub fn kind(&self) -> PpmKind {
        match self {
            PyramidPooling::Dappm { .. } => PpmKind::Dappm,
            PyramidPooling::Global { .. } => PpmKind::Global,
        }
    }

    pub fn in_channels(&self) -> usize {
        match self {
            PyramidPooling::Dappm { shortcut, .. } => shortcut.conv.c_in(),
            PyramidPooling::Global { local, .. } => local.conv.c_in(),
        }
    }

    pub fn forward<'a, E: Exec<'a, T>>(&'a self, e: &mut E, x: &E::Value) -> Result<E::Value> {
        let d = e.dims(x);
        if d.c != self.in_channels() {
            return Err(shape_err!("pyramid pooling expects {} channels, got {d}", self.in_channels()));
        }
        match self {
            PyramidPooling::Dappm { scales, process, compression, shortcut } => {
                if scales.len() != 5 || process.len() != 4 {
                    return Err(invalid!("DAPPM needs 5 scale convs and 4 process convs"));
                }
                let mut prev = e.conv_bn_relu(x, &scales[0])?;
                let mut levels = alloc::vec![prev.clone()];
                for i in 1..5 {
                    let pooled = match DAPPM_POOLS.get(i - 1) {
                        Some(&(k, s, p)) => e.avg_pool(x, k, s, p)?,
                        None => e.global_avg_pool(x),
                    };
                    let y = e.conv_bn_relu(&pooled, &scales[i])?;
                    let y = e.resize(&y, d.h, d.w)?;
                    let sum = e.add(&y, &prev)?;
                    prev = e.conv_bn_relu(&sum, &process[i - 1])?;
                    levels.push(prev.clone());
                }
                let cat = e.concat(&levels)?;
                let a = e.conv_bn(&cat, compression)?;
                let b = e.conv_bn(x, shortcut)?;
                e.add(&a, &b)
            }
            PyramidPooling::Global { pooled, local, fuse } => {
                let g = e.global_avg_pool(x);
                let g = e.conv_bn_relu(&g, pooled)?;
                let g = e.resize(&g, d.h, d.w)?;
                let l = e.conv_bn_relu(x, local)?;
                let s = e.add(&g, &l)?;
                e.conv_bn_relu(&s, fuse)
            }
        }
    }
}

pub fn pyramid_pool_forward<T: Real>(p: &PyramidPooling<T>, x: &Tensor4<T>) -> Result<Tensor4<T>> {
    p.forward(&mut Eager::eval(), x)
}

/// 3×3 conv-BN-ReLU to `O_c` channels, then a 1×1 conv to class logits.
#[derive(Debug, Clone, PartialEq)]
pub struct SegHead<T> {
    pub conv3x3: ConvBn<T>,
    pub conv1x1: ConvKernel<T>,
}

impl<T: Real> SegHead<T> {
    pub fn new(init: &mut Init, in_c: usize, head_c: usize, num_classes: usize) -> Self {
        SegHead { conv3x3: ConvBn::new(init, head_c, in_c, 3, 1), conv1x1: init.conv(num_classes, head_c, 1, 1, 0) }
    }

    pub fn num_classes(&self) -> usize {
        self.conv1x1.c_out()
    }

    pub fn forward<'a, E: Exec<'a, T>>(&'a self, e: &mut E, x: &E::Value) -> Result<E::Value> {
        let y = e.conv_bn_relu(x, &self.conv3x3)?;
        e.conv(&y, &self.conv1x1)
    }
}

pub fn seghead_forward<T: Real>(h: &SegHead<T>, x: &Tensor4<T>) -> Result<Tensor4<T>> {
    h.forward(&mut Eager::eval(), x)
}

/// Borrowed view of one parameter-holding leaf.
#[derive(Debug, Clone, Copy)]
pub enum ParamRef<'a, T> {
    Conv(&'a ConvKernel<T>),
    Bn(&'a BatchNorm<T>),
}

#[derive(Debug)]
pub enum ParamMut<'a, T> {
    Conv(&'a mut ConvKernel<T>),
    Bn(&'a mut BatchNorm<T>),
}

/// Enumerates parameter leaves under hierarchical dotted names, in a fixed
/// order shared by both methods.
pub trait HasParams<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ParamRef<'a, T>)>);
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ParamMut<'a, T>)>);
}

impl<T> HasParams<T> for ConvBn<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ParamRef<'a, T>)>) {
        out.push((format!("{prefix}.conv"), ParamRef::Conv(&self.conv)));
        if let Some(bn) = &self.bn {
            out.push((format!("{prefix}.bn"), ParamRef::Bn(bn)));
        }
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ParamMut<'a, T>)>) {
        out.push((format!("{prefix}.conv"), ParamMut::Conv(&mut self.conv)));
        if let Some(bn) = &mut self.bn {
            out.push((format!("{prefix}.bn"), ParamMut::Bn(bn)));
        }
    }
}

impl<T> HasParams<T> for GcBlock<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ParamRef<'a, T>)>) {
        match self {
            GcBlock::Inference { fused, .. } => out.push((format!("{prefix}.fused"), ParamRef::Conv(fused))),
            GcBlock::Training { paths, .. } => {
                for (i, p) in paths.iter().enumerate() {
                    match p {
                        Path::Conv3x3Conv1x1 { first, second } | Path::Conv1x1Conv1x1 { first, second } => {
                            first.params(&format!("{prefix}.p{i}.c0"), out);
                            second.params(&format!("{prefix}.p{i}.c1"), out);
                        }
                        Path::Residual { bn } => out.push((format!("{prefix}.p{i}.bn"), ParamRef::Bn(bn))),
                    }
                }
            }
        }
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ParamMut<'a, T>)>) {
        match self {
            GcBlock::Inference { fused, .. } => out.push((format!("{prefix}.fused"), ParamMut::Conv(fused))),
            GcBlock::Training { paths, .. } => {
                for (i, p) in paths.iter_mut().enumerate() {
                    match p {
                        Path::Conv3x3Conv1x1 { first, second } | Path::Conv1x1Conv1x1 { first, second } => {
                            first.params_mut(&format!("{prefix}.p{i}.c0"), out);
                            second.params_mut(&format!("{prefix}.p{i}.c1"), out);
                        }
                        Path::Residual { bn } => out.push((format!("{prefix}.p{i}.bn"), ParamMut::Bn(bn))),
                    }
                }
            }
        }
    }
}

impl<T> HasParams<T> for FusionModule<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ParamRef<'a, T>)>) {
        for (i, cb) in self.convs.iter().enumerate() {
            cb.params(&format!("{prefix}.{i}"), out);
        }
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ParamMut<'a, T>)>) {
        for (i, cb) in self.convs.iter_mut().enumerate() {
            cb.params_mut(&format!("{prefix}.{i}"), out);
        }
    }
}

impl<T> HasParams<T> for PyramidPooling<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ParamRef<'a, T>)>) {
        match self {
            PyramidPooling::Dappm { scales, process, compression, shortcut } => {
                for (i, cb) in scales.iter().enumerate() {
                    cb.params(&format!("{prefix}.scale{i}"), out);
                }
                for (i, cb) in process.iter().enumerate() {
                    cb.params(&format!("{prefix}.process{}", i + 1), out);
                }
                compression.params(&format!("{prefix}.compression"), out);
                shortcut.params(&format!("{prefix}.shortcut"), out);
            }
            PyramidPooling::Global { pooled, local, fuse } => {
                pooled.params(&format!("{prefix}.global"), out);
                local.params(&format!("{prefix}.local"), out);
                fuse.params(&format!("{prefix}.fuse"), out);
            }
        }
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ParamMut<'a, T>)>) {
        match self {
            PyramidPooling::Dappm { scales, process, compression, shortcut } => {
                for (i, cb) in scales.iter_mut().enumerate() {
                    cb.params_mut(&format!("{prefix}.scale{i}"), out);
                }
                for (i, cb) in process.iter_mut().enumerate() {
                    cb.params_mut(&format!("{prefix}.process{}", i + 1), out);
                }
                compression.params_mut(&format!("{prefix}.compression"), out);
                shortcut.params_mut(&format!("{prefix}.shortcut"), out);
            }
            PyramidPooling::Global { pooled, local, fuse } => {
                pooled.params_mut(&format!("{prefix}.global"), out);
                local.params_mut(&format!("{prefix}.local"), out);
                fuse.params_mut(&format!("{prefix}.fuse"), out);
            }
        }
    }
}

impl<T> HasParams<T> for SegHead<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ParamRef<'a, T>)>) {
        self.conv3x3.params(&format!("{prefix}.conv3x3"), out);
        out.push((format!("{prefix}.conv1x1"), ParamRef::Conv(&self.conv1x1)));
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ParamMut<'a, T>)>) {
        self.conv3x3.params_mut(&format!("{prefix}.conv3x3"), out);
        out.push((format!("{prefix}.conv1x1"), ParamMut::Conv(&mut self.conv1x1)));
    }
}

/// Scalar count of a parameter leaf: weights and biases for convs, γ and β
/// for batch norm (running statistics are buffers, not parameters).
pub fn leaf_param_count<T: Real>(p: &ParamRef<'_, T>) -> usize {
    match p {
        ParamRef::Conv(k) => k.param_count(),
        ParamRef::Bn(bn) => 2 * bn.channels(),
    }
}
