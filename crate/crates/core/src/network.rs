//! Two-branch segmentation network assembled from reparameterizable blocks.
//!
//! Stage plan (input H×W):
//!
//! | stage | semantic          | detail          |
//! |-------|-------------------|-----------------|
//! | S1    | H/4 × W/4 × C     |                 |
//! | S2    | H/4 × W/4 × C     |                 |
//! | S3    | H/8 × W/8 × 2C    |                 |
//! | S4    | H/16 × W/16 × 4C  | H/8 × W/8 × 2C  |
//! | S5    | H/32 × W/32 × 8C  | H/8 × W/8 × 2C  |
//! | S6    | H/64 × W/64 × 16C | H/8 × W/8 × 4C  |
//!
//! Bilateral fusion follows S4 and S5; pyramid pooling follows S6 on the
//! semantic side, is upsampled and added to the detail features, and the
//! head predicts at H/8 before a final bilinear upsample.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{
    bilateral_fuse_with, leaf_param_count, BlockSpec, ConvBn, FusionModule, GcBlock, HasParams, Init, ParamMut, ParamRef,
    PpmKind, PyramidPooling, SegHead,
};
use crate::error::{invalid, shape_err};
use crate::exec::{Eager, Exec, ParamKey};
use crate::ops::{BatchStats, Mode};
use crate::{Dims, Error, Real, Result, Tensor4};

/// Spatial dims must be multiples of this so every stage divides evenly.
pub const INPUT_MULTIPLE: usize = 64;
pub const INPUT_CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    S,
    M,
    L,
}

impl Variant {
    pub fn base_channels(self) -> usize {
        match self {
            Variant::S => 32,
            Variant::M | Variant::L => 64,
        }
    }

    /// Number of 3×3→1×1 paths per block.
    pub fn paths(self) -> usize {
        match self {
            Variant::S => 4,
            Variant::M | Variant::L => 2,
        }
    }

    pub fn head_channels(self) -> usize {
        match self {
            Variant::S => 64,
            Variant::M => 128,
            Variant::L => 256,
        }
    }

    pub fn stage_plan(self) -> StagePlan {
        match self {
            Variant::S | Variant::M => StagePlan { s2: 4, s3: 4, s4: (5, 4), s5: (5, 4), s6: (2, 2) },
            Variant::L => StagePlan { s2: 5, s3: 5, s4: (5, 5), s5: (5, 5), s6: (3, 3) },
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Variant::S => 0,
            Variant::M => 1,
            Variant::L => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Variant::S),
            1 => Some(Variant::M),
            2 => Some(Variant::L),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::S => "S",
            Variant::M => "M",
            Variant::L => "L",
        }
    }
}

impl core::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "S" | "s" => Ok(Variant::S),
            "M" | "m" => Ok(Variant::M),
            "L" | "l" => Ok(Variant::L),
            _ => Err(invalid!("unknown variant {s:?}, expected S, M or L")),
        }
    }
}

/// Block counts per stage; branched stages are `(semantic, detail)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StagePlan {
    pub s2: usize,
    pub s3: usize,
    pub s4: (usize, usize),
    pub s5: (usize, usize),
    pub s6: (usize, usize),
}

impl StagePlan {
    pub fn counts(&self) -> [usize; 8] {
        [self.s2, self.s3, self.s4.0, self.s4.1, self.s5.0, self.s5.1, self.s6.0, self.s6.1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub variant: Variant,
    pub base_channels: usize,
    pub n_paths: usize,
    pub head_channels: usize,
    pub num_classes: usize,
    pub input_h: usize,
    pub input_w: usize,
    pub blocks: StagePlan,
    pub ppm: PpmKind,
}

impl NetworkConfig {
    pub fn new(variant: Variant, num_classes: usize) -> Self {
        NetworkConfig {
            variant,
            base_channels: variant.base_channels(),
            n_paths: variant.paths(),
            head_channels: variant.head_channels(),
            num_classes,
            input_h: 1024,
            input_w: 2048,
            blocks: variant.stage_plan(),
            ppm: PpmKind::Dappm,
        }
    }

    pub fn with_base_channels(mut self, c: usize) -> Self {
        self.base_channels = c;
        self
    }

    pub fn with_input(mut self, h: usize, w: usize) -> Self {
        self.input_h = h;
        self.input_w = w;
        self
    }

    pub fn with_ppm(mut self, kind: PpmKind) -> Self {
        self.ppm = kind;
        self
    }

    /// Width of each pyramid-pooling branch: 128, narrowed for small base
    /// widths so the module does not dominate the network.
    pub fn ppm_branch(&self) -> usize {
        (4 * self.base_channels).min(128)
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.n_paths == 0 || self.head_channels == 0 || self.num_classes == 0 {
            return Err(invalid!("channel counts, path count and class count must be positive"));
        }
        check_input_dims(self.input_h, self.input_w)?;
        if self.blocks.counts().contains(&0) {
            return Err(invalid!("every stage needs at least one block"));
        }
        Ok(())
    }
}

pub fn check_input_dims(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || !h.is_multiple_of(INPUT_MULTIPLE) || !w.is_multiple_of(INPUT_MULTIPLE) {
        return Err(invalid!(
            "input {h}x{w} is not divisible by {INPUT_MULTIPLE}: the semantic branch downsamples 64x, \
             so both sides must be positive multiples of {INPUT_MULTIPLE}"
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Form {
    Training,
    Inference,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    pub cfg: NetworkConfig,
    pub form: Form,
    pub stem: Vec<ConvBn<T>>,
    pub s2: Vec<GcBlock<T>>,
    pub s3: Vec<GcBlock<T>>,
    pub s4_sem: Vec<GcBlock<T>>,
    pub s4_det: Vec<GcBlock<T>>,
    pub fuse4_s2d: FusionModule<T>,
    pub fuse4_d2s: FusionModule<T>,
    pub s5_sem: Vec<GcBlock<T>>,
    pub s5_det: Vec<GcBlock<T>>,
    pub fuse5_s2d: FusionModule<T>,
    pub fuse5_d2s: FusionModule<T>,
    pub s6_sem: Vec<GcBlock<T>>,
    pub s6_det: Vec<GcBlock<T>>,
    pub ppm: PyramidPooling<T>,
    pub head: SegHead<T>,
    pub aux_head: Option<SegHead<T>>,
}

/// Forward results. `stages` lists each stage's output shape in order.
#[derive(Debug, Clone)]
pub struct Outputs<V> {
    pub logits: V,
    pub aux: Option<V>,
    pub stages: Vec<(&'static str, Dims)>,
}

fn stage<T: Real>(init: &mut Init, count: usize, c_in: usize, c_out: usize, first_stride: usize, n_paths: usize) -> Result<Vec<GcBlock<T>>> {
    (0..count)
        .map(|i| {
            let spec = if i == 0 { BlockSpec::new(c_in, c_out, first_stride, n_paths) } else { BlockSpec::new(c_out, c_out, 1, n_paths) };
            GcBlock::new(spec, init)
        })
        .collect()
}

fn run_stage<'a, T: Real, E: Exec<'a, T>>(e: &mut E, blocks: &'a [GcBlock<T>], x: E::Value) -> Result<E::Value> {
    let mut x = x;
    for b in blocks {
        x = b.forward(e, &x)?;
    }
    Ok(x)
}

impl<T: Real> Network<T> {
    /// Training-form network with deterministic weights drawn from `seed`.
    pub fn build(cfg: NetworkConfig, seed: u64) -> Result<Self> {
        Self::assemble(cfg, &mut Init::He(ChaCha8Rng::seed_from_u64(seed)))
    }

    /// Zero-weight network of the requested form, to be filled from storage.
    pub fn skeleton(cfg: NetworkConfig, form: Form) -> Result<Self> {
        let net = Self::assemble(cfg, &mut Init::Zeros)?;
        match form {
            Form::Training => Ok(net),
            Form::Inference => crate::reparam::zeroed_inference_layout(&net),
        }
    }

    fn assemble(cfg: NetworkConfig, init: &mut Init) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.base_channels;
        let n = cfg.n_paths;
        let p = cfg.blocks;
        Ok(Network {
            stem: alloc::vec![ConvBn::new(init, c, INPUT_CHANNELS, 3, 2), ConvBn::new(init, c, c, 3, 2)],
            s2: stage(init, p.s2, c, c, 1, n)?,
            s3: stage(init, p.s3, c, 2 * c, 2, n)?,
            s4_sem: stage(init, p.s4.0, 2 * c, 4 * c, 2, n)?,
            s4_det: stage(init, p.s4.1, 2 * c, 2 * c, 1, n)?,
            fuse4_s2d: FusionModule::semantic_to_detail(init, 4 * c, 2 * c),
            fuse4_d2s: FusionModule::detail_to_semantic(init, 2 * c, 4 * c, 2)?,
            s5_sem: stage(init, p.s5.0, 4 * c, 8 * c, 2, n)?,
            s5_det: stage(init, p.s5.1, 2 * c, 2 * c, 1, n)?,
            fuse5_s2d: FusionModule::semantic_to_detail(init, 8 * c, 2 * c),
            fuse5_d2s: FusionModule::detail_to_semantic(init, 2 * c, 8 * c, 4)?,
            s6_sem: stage(init, p.s6.0, 8 * c, 16 * c, 2, n)?,
            s6_det: stage(init, p.s6.1, 2 * c, 4 * c, 1, n)?,
            ppm: PyramidPooling::new(cfg.ppm, init, 16 * c, cfg.ppm_branch(), 4 * c),
            head: SegHead::new(init, 4 * c, cfg.head_channels, cfg.num_classes),
            aux_head: Some(SegHead::new(init, 2 * c, cfg.head_channels, cfg.num_classes)),
            form: Form::Training,
            cfg,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.cfg.num_classes
    }

    /// All blocks in forward order.
    pub fn blocks(&self) -> impl Iterator<Item = &GcBlock<T>> {
        [&self.s2, &self.s3, &self.s4_sem, &self.s4_det, &self.s5_sem, &self.s5_det, &self.s6_sem, &self.s6_det]
            .into_iter()
            .flat_map(|s| s.iter())
    }

    pub fn blocks_mut(&mut self) -> impl Iterator<Item = &mut GcBlock<T>> {
        [
            &mut self.s2,
            &mut self.s3,
            &mut self.s4_sem,
            &mut self.s4_det,
            &mut self.s5_sem,
            &mut self.s5_det,
            &mut self.s6_sem,
            &mut self.s6_det,
        ]
        .into_iter()
        .flat_map(|s| s.iter_mut())
    }

    pub fn params(&self) -> Vec<(String, ParamRef<'_, T>)> {
        let mut out = Vec::new();
        HasParams::params(self, "", &mut out);
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, ParamMut<'_, T>)> {
        let mut out = Vec::new();
        HasParams::params_mut(self, "", &mut out);
        out
    }

    /// Weights, biases and batch-norm affine parameters.
    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, p)| leaf_param_count(p)).sum()
    }

    pub fn batch_norm_count(&self) -> usize {
        self.params().iter().filter(|(_, p)| matches!(p, ParamRef::Bn(_))).count()
    }

    /// Runs the forward graph under any executor. The auxiliary head is only
    /// evaluated when `want_aux` is set and the network still has one.
    pub fn forward_with<'a, E: Exec<'a, T>>(&'a self, e: &mut E, x: &E::Value, want_aux: bool) -> Result<Outputs<E::Value>> {
        let d = e.dims(x);
        if d.c != INPUT_CHANNELS {
            return Err(shape_err!("network expects {INPUT_CHANNELS} input channels, got {d}"));
        }
        check_input_dims(d.h, d.w)?;
        let mut stages = Vec::with_capacity(12);
        let mut y = x.clone();
        for cb in &self.stem {
            y = e.conv_bn_relu(&y, cb)?;
        }
        stages.push(("s1", e.dims(&y)));
        let y = run_stage(e, &self.s2, y)?;
        stages.push(("s2", e.dims(&y)));
        let y = run_stage(e, &self.s3, y)?;
        stages.push(("s3", e.dims(&y)));

        let sem = run_stage(e, &self.s4_sem, y.clone())?;
        let det = run_stage(e, &self.s4_det, y)?;
        stages.push(("s4.sem", e.dims(&sem)));
        stages.push(("s4.det", e.dims(&det)));
        let (sem, det) = bilateral_fuse_with(e, &sem, &det, &self.fuse4_s2d, &self.fuse4_d2s)?;
        let aux = match (&self.aux_head, want_aux) {
            (Some(h), true) => {
                let a = h.forward(e, &det)?;
                Some(e.resize(&a, d.h, d.w)?)
            }
            _ => None,
        };

        let sem = run_stage(e, &self.s5_sem, sem)?;
        let det = run_stage(e, &self.s5_det, det)?;
        stages.push(("s5.sem", e.dims(&sem)));
        stages.push(("s5.det", e.dims(&det)));
        let (sem, det) = bilateral_fuse_with(e, &sem, &det, &self.fuse5_s2d, &self.fuse5_d2s)?;

        let sem = run_stage(e, &self.s6_sem, sem)?;
        let det = run_stage(e, &self.s6_det, det)?;
        stages.push(("s6.sem", e.dims(&sem)));
        stages.push(("s6.det", e.dims(&det)));

        let ctx = self.ppm.forward(e, &sem)?;
        stages.push(("ppm", e.dims(&ctx)));
        let dd = e.dims(&det);
        let ctx = e.resize(&ctx, dd.h, dd.w)?;
        let feat = e.add(&ctx, &det)?;
        let logits = self.head.forward(e, &feat)?;
        stages.push(("head", e.dims(&logits)));
        let logits = e.resize(&logits, d.h, d.w)?;
        Ok(Outputs { logits, aux, stages })
    }

    /// Eval-mode logits at input resolution.
    pub fn forward(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        Ok(self.forward_with(&mut Eager::eval(), x, false)?.logits)
    }

    /// Train-mode forward: batch statistics normalize, running statistics
    /// are updated afterwards, and auxiliary logits are returned.
    pub fn forward_train(&mut self, x: &Tensor4<T>) -> Result<Outputs<Tensor4<T>>> {
        if self.form != Form::Training {
            return Err(Error::Form("inference-form networks cannot run in train mode".into()));
        }
        let mut e = Eager::new(Mode::Train);
        let out = self.forward_with(&mut e, x, true)?;
        self.apply_bn_stats(&e.bn_stats, None);
        Ok(out)
    }

    /// Folds recorded batch statistics into the running averages, using each
    /// batch norm's own momentum unless `momentum` overrides it.
    pub fn apply_bn_stats(&mut self, stats: &[(ParamKey, BatchStats<T>)], momentum: Option<T>) {
        let by_key: BTreeMap<ParamKey, &BatchStats<T>> = stats.iter().map(|(k, s)| (*k, s)).collect();
        for (_, p) in self.params_mut() {
            if let ParamMut::Bn(bn) = p {
                if let Some(s) = by_key.get(&ParamKey::of(&*bn)) {
                    let m = momentum.unwrap_or(bn.momentum);
                    bn.update_running(s, m);
                }
            }
        }
    }

    /// Sets every running statistic to the statistics of `x` itself, as seen
    /// by a train-mode pass. Afterwards eval mode on `x` reproduces train mode.
    pub fn calibrate_bn(&mut self, x: &Tensor4<T>) -> Result<()> {
        if self.form != Form::Training {
            return Err(Error::Form("inference-form networks have no batch norm".into()));
        }
        let mut e = Eager::new(Mode::Train);
        self.forward_with(&mut e, x, true)?;
        self.apply_bn_stats(&e.bn_stats, Some(T::one()));
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        let mut out = Network::<U>::skeleton(self.cfg.clone(), self.form).expect("config was valid");
        if self.form == Form::Training && self.aux_head.is_none() {
            out.aux_head = None;
        }
        let src = self.params();
        for ((_, s), (_, d)) in src.iter().zip(out.params_mut()) {
            match (s, d) {
                (ParamRef::Conv(a), ParamMut::Conv(b)) => *b = a.cast(),
                (ParamRef::Bn(a), ParamMut::Bn(b)) => *b = a.cast(),
                _ => unreachable!("skeleton mirrors the source structure"),
            }
        }
        out
    }
}

/// `network_forward` in one call: eval mode returns primary logits only;
/// train mode also returns auxiliary logits and updates running statistics.
pub fn network_forward<T: Real>(net: &mut Network<T>, x: &Tensor4<T>, mode: Mode) -> Result<Outputs<Tensor4<T>>> {
    match mode {
        Mode::Eval => net.forward_with(&mut Eager::eval(), x, false),
        Mode::Train => net.forward_train(x),
    }
}

pub fn build_gcnet<T: Real>(cfg: NetworkConfig, seed: u64) -> Result<Network<T>> {
    Network::build(cfg, seed)
}

fn stage_params<'a, T>(blocks: &'a [GcBlock<T>], prefix: &str, out: &mut Vec<(String, ParamRef<'a, T>)>) {
    for (i, b) in blocks.iter().enumerate() {
        b.params(&format!("{prefix}.b{i}"), out);
    }
}

fn stage_params_mut<'a, T>(blocks: &'a mut [GcBlock<T>], prefix: &str, out: &mut Vec<(String, ParamMut<'a, T>)>) {
    for (i, b) in blocks.iter_mut().enumerate() {
        b.params_mut(&format!("{prefix}.b{i}"), out);
    }
}

impl<T> HasParams<T> for Network<T> {
    fn params<'a>(&'a self, _prefix: &str, out: &mut Vec<(String, ParamRef<'a, T>)>) {
        for (i, cb) in self.stem.iter().enumerate() {
            cb.params(&format!("stem.{i}"), out);
        }
        stage_params(&self.s2, "s2", out);
        stage_params(&self.s3, "s3", out);
        stage_params(&self.s4_sem, "s4.sem", out);
        stage_params(&self.s4_det, "s4.det", out);
        self.fuse4_s2d.params("fuse4.s2d", out);
        self.fuse4_d2s.params("fuse4.d2s", out);
        stage_params(&self.s5_sem, "s5.sem", out);
        stage_params(&self.s5_det, "s5.det", out);
        self.fuse5_s2d.params("fuse5.s2d", out);
        self.fuse5_d2s.params("fuse5.d2s", out);
        stage_params(&self.s6_sem, "s6.sem", out);
        stage_params(&self.s6_det, "s6.det", out);
        self.ppm.params("ppm", out);
        self.head.params("head", out);
        if let Some(h) = &self.aux_head {
            h.params("aux_head", out);
        }
    }

    fn params_mut<'a>(&'a mut self, _prefix: &str, out: &mut Vec<(String, ParamMut<'a, T>)>) {
        for (i, cb) in self.stem.iter_mut().enumerate() {
            cb.params_mut(&format!("stem.{i}"), out);
        }
        stage_params_mut(&mut self.s2, "s2", out);
        stage_params_mut(&mut self.s3, "s3", out);
        stage_params_mut(&mut self.s4_sem, "s4.sem", out);
        stage_params_mut(&mut self.s4_det, "s4.det", out);
        self.fuse4_s2d.params_mut("fuse4.s2d", out);
        self.fuse4_d2s.params_mut("fuse4.d2s", out);
        stage_params_mut(&mut self.s5_sem, "s5.sem", out);
        stage_params_mut(&mut self.s5_det, "s5.det", out);
        self.fuse5_s2d.params_mut("fuse5.s2d", out);
        self.fuse5_d2s.params_mut("fuse5.d2s", out);
        stage_params_mut(&mut self.s6_sem, "s6.sem", out);
        stage_params_mut(&mut self.s6_det, "s6.det", out);
        self.ppm.params_mut("ppm", out);
        self.head.params_mut("head", out);
        if let Some(h) = &mut self.aux_head {
            h.params_mut("aux_head", out);
        }
    }
}
