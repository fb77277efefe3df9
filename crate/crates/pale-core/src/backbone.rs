//! The four-stage hierarchical backbone built from pale attention blocks.
//!
//! Each stage opens with an overlapping-convolution patch merge (7x7 stride
//! 4 for the first stage, 3x3 stride 2 afterwards, channels doubling) and
//! stacks blocks of the form
//!
//! ```text
//! x = x + CPE(x)                 depthwise 3x3 position encoding
//! x = x + Attn(LN(x))            the configured attention mode
//! x = x + MLP(LN(x))             expand by R, GELU, contract
//! ```
//!
//! Classification head: LN, global average pool, single linear projection.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::attention::{attention_forward, AttentionMode, AttentionParams};
use crate::partition::PartitionSpec;
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Shape, Tensor};
use crate::trace::FlopTrace;
use crate::{Error, Result};

pub const LN_EPS: f64 = 1e-5;

/// Hyper-parameters of one stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageConfig {
    /// Patch-merge spatial reduction (`P_i`).
    pub merge_stride: usize,
    /// Embedding dimension (`C_i`).
    pub channels: usize,
    /// Pale size (`S_i`), used for both rows and columns.
    pub pale_size: usize,
    /// Attention heads (`H_i`).
    pub heads: usize,
    /// MLP expansion ratio (`R_i`).
    pub mlp_ratio: usize,
    /// Number of blocks.
    pub depth: usize,
}

/// Full model configuration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VariantConfig {
    pub stages: Vec<StageConfig>,
    pub num_classes: usize,
    pub in_channels: usize,
    pub mode: AttentionMode,
    /// Interlaced grouping unless the cross-shaped baseline is selected.
    pub interlaced: bool,
}

impl VariantConfig {
    fn named(channels: [usize; 4], heads: [usize; 4], num_classes: usize) -> Self {
        let depths = [2, 2, 16, 2];
        let strides = [4, 2, 2, 2];
        let stages = (0..4)
            .map(|i| StageConfig {
                merge_stride: strides[i],
                channels: channels[i],
                pale_size: 7,
                heads: heads[i],
                mlp_ratio: 4,
                depth: depths[i],
            })
            .collect();
        Self {
            stages,
            num_classes,
            in_channels: 3,
            mode: AttentionMode::PaleParallel,
            interlaced: true,
        }
    }

    pub fn pale_t(num_classes: usize) -> Self {
        Self::named([64, 128, 256, 512], [2, 4, 8, 16], num_classes)
    }

    pub fn pale_s(num_classes: usize) -> Self {
        Self::named([96, 192, 384, 768], [2, 4, 8, 16], num_classes)
    }

    pub fn pale_b(num_classes: usize) -> Self {
        Self::named([128, 256, 512, 1024], [4, 8, 16, 32], num_classes)
    }

    /// Desk-scale configuration for the toy training loop and tests.
    pub fn tiny(num_classes: usize) -> Self {
        let channels = [16, 32, 64, 128];
        let heads = [2, 2, 4, 4];
        let depths = [1, 1, 2, 1];
        let strides = [4, 2, 2, 2];
        let stages = (0..4)
            .map(|i| StageConfig {
                merge_stride: strides[i],
                channels: channels[i],
                pale_size: 4,
                heads: heads[i],
                mlp_ratio: 4,
                depth: depths[i],
            })
            .collect();
        Self {
            stages,
            num_classes,
            in_channels: 3,
            mode: AttentionMode::PaleParallel,
            interlaced: true,
        }
    }

    pub fn by_name(name: &str, num_classes: usize) -> Result<Self> {
        match name {
            "t" | "T" | "pale-t" => Ok(Self::pale_t(num_classes)),
            "s" | "S" | "pale-s" => Ok(Self::pale_s(num_classes)),
            "b" | "B" | "pale-b" => Ok(Self::pale_b(num_classes)),
            "tiny" => Ok(Self::tiny(num_classes)),
            other => Err(Error::InvalidArgument {
                op: "VariantConfig::by_name",
                detail: format!("unknown variant '{other}'"),
            }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() || self.num_classes == 0 || self.in_channels == 0 {
            return Err(Error::InvalidArgument {
                op: "VariantConfig",
                detail: "empty stages or zero classes/channels".into(),
            });
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.channels == 0 || s.heads == 0 || s.channels % s.heads != 0 {
                return Err(Error::InvalidArgument {
                    op: "VariantConfig",
                    detail: format!(
                        "stage {i}: heads {} must divide channels {}",
                        s.heads, s.channels
                    ),
                });
            }
            if s.pale_size == 0 || s.mlp_ratio == 0 || s.depth == 0 || s.merge_stride == 0 {
                return Err(Error::InvalidArgument {
                    op: "VariantConfig",
                    detail: format!("stage {i}: zero-valued hyper-parameter"),
                });
            }
            if self.mode.splits_channels() && (s.channels % 2 != 0 || s.heads % 2 != 0) {
                return Err(Error::InvalidArgument {
                    op: "VariantConfig",
                    detail: format!(
                        "stage {i}: mode {} needs even channels and heads",
                        self.mode.name()
                    ),
                });
            }
        }
        Ok(())
    }

    /// Product of the merge strides: the minimum input extent.
    pub fn total_stride(&self) -> usize {
        self.stages.iter().map(|s| s.merge_stride).product()
    }

    pub fn spec_for(&self, stage: &StageConfig) -> PartitionSpec {
        PartitionSpec::new(stage.pale_size, stage.pale_size, self.interlaced)
    }

    /// Patch-merge kernel size and padding for a stage index.
    pub fn merge_kernel(&self, stage_index: usize) -> (usize, usize) {
        if stage_index == 0 {
            (7, 3)
        } else {
            (3, 1)
        }
    }
}

#[derive(Debug, Clone)]
pub struct NormParams<P> {
    pub gamma: P,
    pub beta: P,
}

impl<P> NormParams<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> NormParams<Q> {
        NormParams { gamma: f(&self.gamma), beta: f(&self.beta) }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a P)) {
        f(format!("{prefix}.gamma"), &self.gamma);
        f(format!("{prefix}.beta"), &self.beta);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut P)) {
        f(format!("{prefix}.gamma"), &mut self.gamma);
        f(format!("{prefix}.beta"), &mut self.beta);
    }
}

#[derive(Debug, Clone)]
pub struct ConvParams<P> {
    pub weight: P,
    pub bias: P,
}

impl<P> ConvParams<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> ConvParams<Q> {
        ConvParams { weight: f(&self.weight), bias: f(&self.bias) }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a P)) {
        f(format!("{prefix}.weight"), &self.weight);
        f(format!("{prefix}.bias"), &self.bias);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut P)) {
        f(format!("{prefix}.weight"), &mut self.weight);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

/// Weights of one transformer block.
#[derive(Debug, Clone)]
pub struct BlockParams<P> {
    pub cpe: ConvParams<P>,
    pub norm1: NormParams<P>,
    pub attn: AttentionParams<P>,
    pub norm2: NormParams<P>,
    pub mlp_expand: ConvParams<P>,
    pub mlp_contract: ConvParams<P>,
}

impl<P> BlockParams<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> BlockParams<Q> {
        BlockParams {
            cpe: self.cpe.map(f),
            norm1: self.norm1.map(f),
            attn: self.attn.map(f),
            norm2: self.norm2.map(f),
            mlp_expand: self.mlp_expand.map(f),
            mlp_contract: self.mlp_contract.map(f),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a P)) {
        self.cpe.visit(&format!("{prefix}.cpe"), f);
        self.norm1.visit(&format!("{prefix}.norm1"), f);
        self.attn.visit(&format!("{prefix}.attn"), f);
        self.norm2.visit(&format!("{prefix}.norm2"), f);
        self.mlp_expand.visit(&format!("{prefix}.mlp.expand"), f);
        self.mlp_contract.visit(&format!("{prefix}.mlp.contract"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut P)) {
        self.cpe.visit_mut(&format!("{prefix}.cpe"), f);
        self.norm1.visit_mut(&format!("{prefix}.norm1"), f);
        self.attn.visit_mut(&format!("{prefix}.attn"), f);
        self.norm2.visit_mut(&format!("{prefix}.norm2"), f);
        self.mlp_expand.visit_mut(&format!("{prefix}.mlp.expand"), f);
        self.mlp_contract.visit_mut(&format!("{prefix}.mlp.contract"), f);
    }
}

#[derive(Debug, Clone)]
pub struct StageParams<P> {
    pub merge: ConvParams<P>,
    pub merge_norm: NormParams<P>,
    pub blocks: Vec<BlockParams<P>>,
}

impl<P> StageParams<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> StageParams<Q> {
        StageParams {
            merge: self.merge.map(f),
            merge_norm: self.merge_norm.map(f),
            blocks: self.blocks.iter().map(|b| b.map(f)).collect(),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a P)) {
        self.merge.visit(&format!("{prefix}.merge"), f);
        self.merge_norm.visit(&format!("{prefix}.merge_norm"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("{prefix}.blocks.{i}"), f);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut P)) {
        self.merge.visit_mut(&format!("{prefix}.merge"), f);
        self.merge_norm.visit_mut(&format!("{prefix}.merge_norm"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("{prefix}.blocks.{i}"), f);
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModelParams<P> {
    pub stages: Vec<StageParams<P>>,
    pub final_norm: NormParams<P>,
    pub head: ConvParams<P>,
}

impl<P> ModelParams<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> ModelParams<Q> {
        ModelParams {
            stages: self.stages.iter().map(|s| s.map(f)).collect(),
            final_norm: self.final_norm.map(f),
            head: self.head.map(f),
        }
    }

    /// Call `f` with every parameter in a fixed, name-stable order.
    pub fn visit<'a>(&'a self, f: &mut impl FnMut(String, &'a P)) {
        for (i, s) in self.stages.iter().enumerate() {
            s.visit(&format!("stages.{i}"), f);
        }
        self.final_norm.visit("final_norm", f);
        self.head.visit("head", f);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(String, &mut P)) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.visit_mut(&format!("stages.{i}"), f);
        }
        self.final_norm.visit_mut("final_norm", f);
        self.head.visit_mut("head", f);
    }
}

/// A configured model with its weights.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: VariantConfig,
    pub params: ModelParams<Tensor<T>>,
}

fn trunc_normal<T: Real>(shape: Shape, rng: &mut Rng, zeroed: bool) -> Tensor<T> {
    let mut t = Tensor::zeros(shape);
    if !zeroed {
        rng.fill_truncated_normal(t.data_mut(), 0.02);
    }
    t
}

fn norm_init<T: Real>(c: usize) -> NormParams<Tensor<T>> {
    NormParams {
        gamma: Tensor::filled(Shape::new(1, 1, 1, c), T::one()),
        beta: Tensor::zeros(Shape::new(1, 1, 1, c)),
    }
}

impl<T: Real> Model<T> {
    /// Fresh weights: truncated normal (std 0.02) for conv/linear kernels,
    /// ones for norm gains, zeros for every bias. Deterministic in `seed`.
    pub fn init(config: VariantConfig, seed: u64) -> Result<Self> {
        Self::build(config, Some(Rng::new(seed)))
    }

    /// All-zero weights with the config's shapes (checkpoint loading target).
    pub fn zeroed(config: VariantConfig) -> Result<Self> {
        Self::build(config, None)
    }

    fn build(config: VariantConfig, rng: Option<Rng>) -> Result<Self> {
        config.validate()?;
        let zeroed = rng.is_none();
        let mut rng = rng.unwrap_or(Rng::new(0));
        let mut in_c = config.in_channels;
        let mut stages = Vec::with_capacity(config.stages.len());
        for (i, stage) in config.stages.iter().enumerate() {
            let (k, _) = config.merge_kernel(i);
            let c = stage.channels;
            let merge = ConvParams {
                weight: trunc_normal(Shape::new(k, k, in_c, c), &mut rng, zeroed),
                bias: Tensor::zeros(Shape::new(1, 1, 1, c)),
            };
            let merge_norm = norm_init(c);
            let mut blocks = Vec::with_capacity(stage.depth);
            for _ in 0..stage.depth {
                let hidden = c * stage.mlp_ratio;
                blocks.push(BlockParams {
                    cpe: ConvParams {
                        weight: trunc_normal(Shape::new(3, 3, 1, c), &mut rng, zeroed),
                        bias: Tensor::zeros(Shape::new(1, 1, 1, c)),
                    },
                    norm1: norm_init(c),
                    attn: if zeroed {
                        AttentionParams::zeroed(c, stage.heads, config.mode.separable_qkv())
                    } else {
                        AttentionParams::init(c, stage.heads, config.mode.separable_qkv(), &mut rng)
                    },
                    norm2: norm_init(c),
                    mlp_expand: ConvParams {
                        weight: trunc_normal(Shape::new(1, 1, c, hidden), &mut rng, zeroed),
                        bias: Tensor::zeros(Shape::new(1, 1, 1, hidden)),
                    },
                    mlp_contract: ConvParams {
                        weight: trunc_normal(Shape::new(1, 1, hidden, c), &mut rng, zeroed),
                        bias: Tensor::zeros(Shape::new(1, 1, 1, c)),
                    },
                });
            }
            stages.push(StageParams { merge, merge_norm, blocks });
            in_c = c;
        }
        let final_norm = norm_init(in_c);
        let head = ConvParams {
            weight: trunc_normal(Shape::new(1, 1, in_c, config.num_classes), &mut rng, zeroed),
            bias: Tensor::zeros(Shape::new(1, 1, 1, config.num_classes)),
        };
        Ok(Model { config, params: ModelParams { stages, final_norm, head } })
    }

    /// Named variant (`t`, `s`, `b`, or `tiny`).
    pub fn init_variant(name: &str, num_classes: usize, seed: u64) -> Result<Self> {
        Model::init(VariantConfig::by_name(name, num_classes)?, seed)
    }

    /// Total number of learnable values.
    pub fn param_count(&self) -> u64 {
        let mut n = 0u64;
        self.params.visit(&mut |_, t| n += t.data().len() as u64);
        n
    }

    /// Inference outside any surrounding tape; returns logits `(b, 1, 1,
    /// classes)` and the forward trace.
    pub fn forward(&self, images: &Tensor<T>) -> Result<(Tensor<T>, FlopTrace)> {
        let mut tape = Tape::new();
        let vars = self.params.map(&mut |t: &Tensor<T>| tape.leaf(t.clone()));
        let img = tape.leaf(images.clone());
        let logits = forward_on_tape(&mut tape, &vars, &self.config, img)?;
        let out = tape.value(logits).clone();
        Ok((out, tape.take_trace()))
    }
}

/// Hook for stochastic depth. The published training recipe drops residual
/// branches with some probability; verification-scale runs never do, so
/// this is the identity.
fn drop_path(x: Var) -> Var {
    x
}

/// One block: CPE, attention, and MLP, each behind a residual.
pub fn pale_block<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    params: &BlockParams<Var>,
    config: &VariantConfig,
    stage: &StageConfig,
    block_index: usize,
) -> Result<Var> {
    let eps = T::from_f64(LN_EPS);
    let c = tape.shape(x).c;

    let cpe = tape.conv2d(x, params.cpe.weight, Some(params.cpe.bias), (1, 1), (1, 1), c)?;
    let x = tape.add(x, cpe)?;

    let normed = tape.layer_norm(x, params.norm1.gamma, params.norm1.beta, eps)?;
    let spec = config.spec_for(stage);
    let att = attention_forward(tape, normed, config.mode, block_index, &spec, &params.attn, None)?;
    let x = tape.add(x, drop_path(att))?;

    let normed = tape.layer_norm(x, params.norm2.gamma, params.norm2.beta, eps)?;
    let hidden = tape.conv2d(
        normed,
        params.mlp_expand.weight,
        Some(params.mlp_expand.bias),
        (1, 1),
        (0, 0),
        1,
    )?;
    let hidden = tape.gelu(hidden);
    let mlp = tape.conv2d(
        hidden,
        params.mlp_contract.weight,
        Some(params.mlp_contract.bias),
        (1, 1),
        (0, 0),
        1,
    )?;
    tape.add(x, drop_path(mlp))
}

/// Full model forward on an existing tape. The block index driving the
/// sequential mode's row/column alternation runs across stage boundaries.
pub fn forward_on_tape<T: Real>(
    tape: &mut Tape<T>,
    params: &ModelParams<Var>,
    config: &VariantConfig,
    images: Var,
) -> Result<Var> {
    config.validate()?;
    let s = tape.shape(images);
    if s.c != config.in_channels {
        return Err(Error::ShapeMismatch {
            op: "forward",
            detail: format!("expected {} input channels, got {}", config.in_channels, s.c),
        });
    }
    let min = config.total_stride();
    if s.h < min || s.w < min {
        return Err(Error::InvalidArgument {
            op: "forward",
            detail: format!("spatial extents {}x{} below total stride {min}", s.h, s.w),
        });
    }

    let eps = T::from_f64(LN_EPS);
    let mut x = images;
    let mut block_index = 0usize;
    for (i, (stage, sp)) in config.stages.iter().zip(&params.stages).enumerate() {
        let (k, pad) = config.merge_kernel(i);
        let _ = k;
        let stride = stage.merge_stride;
        let merged = tape.scoped("merge", |t| {
            t.conv2d(x, sp.merge.weight, Some(sp.merge.bias), (stride, stride), (pad, pad), 1)
        })?;
        x = tape.layer_norm(merged, sp.merge_norm.gamma, sp.merge_norm.beta, eps)?;
        for bp in &sp.blocks {
            x = pale_block(tape, x, bp, config, stage, block_index)?;
            block_index += 1;
        }
    }

    let normed = tape.layer_norm(x, params.final_norm.gamma, params.final_norm.beta, eps)?;
    let pooled = tape.mean_pool_spatial(normed);
    tape.conv2d(pooled, params.head.weight, Some(params.head.bias), (1, 1), (0, 0), 1)
}

/// Outcome of one optimizer step.
#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    pub loss: f64,
    /// Fraction of the batch classified correctly by the pre-update logits.
    pub accuracy: f64,
    /// Forward multiply-adds (matmul + conv buckets).
    pub forward_mas: u64,
}

/// One plain gradient-descent step with a fixed learning rate.
///
/// Gradients land in each parameter's grad slot before the update, so the
/// caller can inspect them afterwards.
pub fn train_step<T: Real>(
    model: &mut Model<T>,
    images: &Tensor<T>,
    labels: &[usize],
    lr: T,
) -> Result<StepStats> {
    let mut tape = Tape::new();
    let vars = model.params.map(&mut |t: &Tensor<T>| tape.leaf(t.clone()));
    let img = tape.leaf(images.clone());
    let logits = forward_on_tape(&mut tape, &vars, &model.config, img)?;
    let forward_mas = tape.trace().core_mas();

    let logit_values = tape.value(logits);
    let classes = logit_values.shape().c;
    let mut correct = 0usize;
    for b in 0..logit_values.shape().b {
        let mut best = 0;
        for j in 1..classes {
            if logit_values.at(b, 0, 0, j) > logit_values.at(b, 0, 0, best) {
                best = j;
            }
        }
        if best == labels[b] {
            correct += 1;
        }
    }

    let loss = tape.cross_entropy_mean(logits, labels.to_vec())?;
    let loss_value = tape.value(loss).data()[0].as_f64();
    let mut grads = tape.backward(loss)?;

    let mut var_order = Vec::new();
    vars.visit(&mut |_, &v| var_order.push(v));
    let mut idx = 0usize;
    model.params.visit_mut(&mut |name, tensor| {
        let v = var_order[idx];
        idx += 1;
        if let Some(g) = grads.take(v) {
            debug_assert_eq!(g.shape(), tensor.shape(), "grad shape for {name}");
            for (p, gv) in tensor.data_mut().iter_mut().zip(g.data()) {
                *p = *p - lr * *gv;
            }
            let _ = tensor.set_grad(g.into_data());
        }
    });

    Ok(StepStats { loss: loss_value, accuracy: correct as f64 / labels.len() as f64, forward_mas })
}
