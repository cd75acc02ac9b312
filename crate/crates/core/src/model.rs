//! Model assembly: the GMoE vision transformer with configurable MoE
//! placement, and the reference MLP and FCN for the synthetic experiments.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::{Tape, Var};
use crate::moe::{GateDecision, MoELayer, MoEOutput, RouteVars, RouterConfig, RouterKind};
use crate::nn::{extract_patches, Ctx, FeedForward, LayerNorm, Linear, MultiHeadAttention, ParamId, ParamStore, PatchEmbed, INIT_STD};
use crate::rng::{SeedTree, StreamRng, STREAM_INIT};
use crate::tensor::Activation;
use crate::{Error, Result, Scalar, Tensor};

/// Which blocks carry an MoE layer in place of their feed-forward block.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Placement {
    None,
    EveryTwo,
    #[default]
    LastTwo,
    Explicit(Vec<usize>),
}

impl Placement {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(Placement::None),
            "every_two" => Some(Placement::EveryTwo),
            "last_two" => Some(Placement::LastTwo),
            _ => {
                let idx: core::result::Result<Vec<usize>, _> = s.split(',').map(|t| t.trim().parse()).collect();
                idx.ok().map(Placement::Explicit)
            }
        }
    }
}

/// Sorted 0-based block indices for `policy` in a model of `depth` blocks.
///
/// `EveryTwo` gives every even index; `LastTwo` the two largest even indices
/// `≤ depth − 2`.
pub fn resolve_placement(policy: &Placement, depth: usize) -> Result<Vec<usize>> {
    match policy {
        Placement::None => Ok(Vec::new()),
        Placement::EveryTwo => {
            if depth < 2 {
                return Err(Error::config(format!("every_two placement needs at least 2 blocks, got {depth}")));
            }
            Ok((0..depth).step_by(2).collect())
        }
        Placement::LastTwo => {
            if depth < 4 {
                return Err(Error::config(format!("last_two placement needs at least 4 blocks, got {depth}")));
            }
            let top = (depth - 2) & !1;
            Ok(vec![top - 2, top])
        }
        Placement::Explicit(idx) => {
            let mut idx = idx.clone();
            idx.sort_unstable();
            idx.dedup();
            if let Some(&bad) = idx.iter().find(|&&i| i >= depth) {
                return Err(Error::config(format!("placement index {bad} out of range for {depth} blocks")));
            }
            Ok(idx)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub num_classes: usize,
    pub mlp_ratio: usize,
    pub activation: Activation,
    pub placement: Placement,
    pub moe: RouterConfig,
}

impl ModelConfig {
    /// GMoE-S/16: 12 blocks of width 384 with 6 heads on 224×224 images; six
    /// experts per MoE layer with top-2 cosine routing.
    pub fn gmoe_s16(num_classes: usize) -> Self {
        ModelConfig {
            depth: 12,
            dim: 384,
            heads: 6,
            patch_size: 16,
            channels: 3,
            image_height: 224,
            image_width: 224,
            num_classes,
            mlp_ratio: FeedForward::DEFAULT_EXPANSION,
            activation: Activation::Gelu,
            placement: Placement::LastTwo,
            moe: RouterConfig::new(RouterKind::Cosine, 6, 2),
        }
    }

    /// Two blocks of width 8 with 2 heads on `1×4×4` images cut into
    /// `2×2` patches, 3 classes, cosine routing.
    pub fn tiny(num_experts: usize, k: usize, placement: Placement) -> Self {
        ModelConfig {
            depth: 2,
            dim: 8,
            heads: 2,
            patch_size: 2,
            channels: 1,
            image_height: 4,
            image_width: 4,
            num_classes: 3,
            mlp_ratio: 2,
            activation: Activation::Gelu,
            placement,
            moe: RouterConfig::new(RouterKind::Cosine, num_experts, k),
        }
    }

    pub fn hidden(&self) -> usize {
        self.mlp_ratio * self.dim
    }

    pub fn tokens(&self) -> usize {
        (self.image_height / self.patch_size.max(1)) * (self.image_width / self.patch_size.max(1))
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn validate(&self) -> Result<Vec<usize>> {
        let mut problems = Vec::new();
        if self.depth == 0 {
            problems.push(format!("depth must be positive"));
        }
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            problems.push(format!("width {} must be a positive multiple of {} heads", self.dim, self.heads));
        }
        if self.patch_size == 0 || self.image_height % self.patch_size != 0 || self.image_width % self.patch_size != 0 {
            problems.push(format!(
                "image {}x{} is not divisible into {}-pixel patches",
                self.image_height, self.image_width, self.patch_size
            ));
        }
        if self.channels == 0 || self.image_height == 0 || self.image_width == 0 {
            problems.push(format!("image extents must be positive"));
        }
        if self.num_classes < 2 {
            problems.push(format!("need at least 2 classes"));
        }
        if self.mlp_ratio == 0 {
            problems.push(format!("mlp_ratio must be positive"));
        }
        let placed = match resolve_placement(&self.placement, self.depth) {
            Ok(p) => p,
            Err(e) => {
                problems.push(format!("{e}"));
                Vec::new()
            }
        };
        if !placed.is_empty() {
            if let Err(e) = self.moe.validate() {
                problems.push(format!("{e}"));
            }
        }
        if problems.is_empty() {
            Ok(placed)
        } else {
            Err(Error::config(problems.join("; ")))
        }
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> Result<usize> {
        let placed = self.validate()?;
        let (d, h, n) = (self.dim, self.hidden(), self.moe.num_experts);
        let ffn = 2 * d * h + h + d;
        let router = match self.moe.kind {
            RouterKind::Linear => n * d,
            RouterKind::Cosine => {
                let de = self.moe.embed_dim.unwrap_or(d);
                de * d + de * n
            }
        };
        let attn = 4 * d * d + 3 * d;
        let embed = 2 * self.patch_len() + self.patch_len() * d + d + self.tokens() * d + d;
        let blocks: usize = (0..self.depth)
            .map(|i| 4 * d + attn + if placed.contains(&i) { router + n * ffn } else { ffn })
            .sum();
        Ok(embed + blocks + 2 * d + d * self.num_classes + self.num_classes)
    }
}

/// Either a plain feed-forward block or its MoE replacement.
#[derive(Debug, Clone, PartialEq)]
pub enum BlockFfn {
    Dense(FeedForward),
    Moe(MoELayer),
}

/// Pre-norm transformer block:
/// `x = x_in + MHA(LN(x_in))`, then `x_out = x + FFN(LN(x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ffn: BlockFfn,
}

impl Block {
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x_in: Var, seq_len: usize) -> Result<(Var, Option<MoEOutput<T>>)> {
        let h = self.ln1.forward(ctx, x_in)?;
        let h = self.attn.forward(ctx, h, seq_len)?;
        let x = ctx.tape.add(x_in, h)?;
        let h = self.ln2.forward(ctx, x)?;
        let (h, moe) = match &self.ffn {
            BlockFfn::Dense(f) => (f.forward(ctx, h)?, None),
            BlockFfn::Moe(m) => {
                let out = m.forward(ctx, h)?;
                (out.output, Some(out))
            }
        };
        Ok((ctx.tape.add(x, h)?, moe))
    }
}

/// Routing outputs of one MoE layer in a forward pass.
#[derive(Debug, Clone)]
pub struct MoERecord<T: Scalar = f64> {
    pub block: usize,
    pub route: RouteVars,
    pub decision: GateDecision<T>,
}

/// Result of recording a classifier forward pass on a tape.
#[derive(Debug, Clone)]
pub struct Forward<T: Scalar = f64> {
    pub logits: Var,
    pub moe: Vec<MoERecord<T>>,
    pub tokens_per_sample: usize,
}

/// Per-layer routing of one forward pass. Token `t` belongs to sample
/// `t / tokens_per_sample` at position `t % tokens_per_sample`.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingTrace<T: Scalar = f64> {
    pub samples: usize,
    pub tokens_per_sample: usize,
    pub layers: Vec<LayerTrace<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace<T: Scalar = f64> {
    pub block: usize,
    pub decision: GateDecision<T>,
}

impl<T: Scalar> RoutingTrace<T> {
    pub fn tokens(&self) -> usize {
        self.samples * self.tokens_per_sample
    }
}

/// A trainable classifier owning its parameters.
pub trait Classifier<T: Scalar> {
    fn params(&self) -> &ParamStore<T>;
    fn params_mut(&mut self) -> &mut ParamStore<T>;
    fn num_classes(&self) -> usize;
    /// Records the forward pass of a batch `[B × …]` on `ctx`.
    fn forward(&self, ctx: &mut Ctx<'_, T>, inputs: &Tensor<T>) -> Result<Forward<T>>;

    /// Logits and routing trace without gradients. Routing noise is drawn
    /// from `noise` when given (training-mode routing), otherwise disabled.
    fn predict(&self, inputs: &Tensor<T>, noise: Option<&mut StreamRng>) -> Result<(Tensor<T>, RoutingTrace<T>)> {
        let mut tape = Tape::new();
        let ctx = Ctx::new(&mut tape, self.params(), false);
        let mut ctx = match noise {
            Some(rng) => ctx.training(rng),
            None => ctx,
        };
        let out = self.forward(&mut ctx, inputs)?;
        let trace = RoutingTrace {
            samples: inputs.outer(),
            tokens_per_sample: out.tokens_per_sample,
            layers: out
                .moe
                .into_iter()
                .map(|r| LayerTrace {
                    block: r.block,
                    decision: r.decision,
                })
                .collect(),
        };
        Ok((tape.value(out.logits).clone(), trace))
    }
}

/// Vision transformer with a class token whose blocks at the placement
/// indices carry MoE layers.
#[derive(Debug, Clone, PartialEq)]
pub struct GMoE<T: Scalar = f64> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub patch: PatchEmbed,
    pub cls_token: ParamId,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
    pub head: Linear,
    pub placement: Vec<usize>,
}

/// Builds a GMoE (or a plain ViT when the placement is empty) with weights
/// drawn from the `init` stream of `seed`.
pub fn build_gmoe<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<GMoE<T>> {
    let placement = config.validate()?;
    let mut rng = SeedTree::new(seed).stream(STREAM_INIT);
    let mut store = ParamStore::new();
    let d = config.dim;
    let patch = PatchEmbed::new(
        &mut store,
        "embed",
        config.channels,
        (config.image_height, config.image_width),
        config.patch_size,
        d,
        &mut rng,
    )?;
    let cls_token = store.add_trunc_normal("embed.cls", &[1, d], INIT_STD, &mut rng);
    let mut blocks = Vec::with_capacity(config.depth);
    for i in 0..config.depth {
        let name = format!("block{i}");
        let ln1 = LayerNorm::new(&mut store, &format!("{name}.ln1"), d);
        let attn = MultiHeadAttention::new(&mut store, &format!("{name}.attn"), d, config.heads, &mut rng)?;
        let ln2 = LayerNorm::new(&mut store, &format!("{name}.ln2"), d);
        let ffn = if placement.contains(&i) {
            BlockFfn::Moe(MoELayer::new(
                &mut store,
                &format!("{name}.moe"),
                d,
                config.hidden(),
                config.activation,
                config.moe.clone(),
                &mut rng,
            )?)
        } else {
            BlockFfn::Dense(FeedForward::new(
                &mut store,
                &format!("{name}.ffn"),
                d,
                config.hidden(),
                config.activation,
                &mut rng,
            ))
        };
        blocks.push(Block { ln1, attn, ln2, ffn });
    }
    let norm = LayerNorm::new(&mut store, "norm", d);
    let head = Linear::new(&mut store, "head", d, config.num_classes, true, &mut rng);
    Ok(GMoE {
        config: config.clone(),
        params: store,
        patch,
        cls_token,
        blocks,
        norm,
        head,
        placement,
    })
}

impl<T: Scalar> Classifier<T> for GMoE<T> {
    fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    /// `inputs` are images `[B×C×H×W]`.
    fn forward(&self, ctx: &mut Ctx<'_, T>, inputs: &Tensor<T>) -> Result<Forward<T>> {
        let c = &self.config;
        let expect = [c.channels, c.image_height, c.image_width];
        if inputs.rank() != 4 || inputs.shape()[1..] != expect {
            return Err(Error::ShapeMismatch {
                op: "model_forward",
                lhs: inputs.shape().to_vec(),
                rhs: expect.to_vec(),
            });
        }
        let b = inputs.shape()[0];
        let t = self.patch.tokens;
        let seq = t + 1;
        let patches = ctx.tape.constant(extract_patches(inputs, c.patch_size)?);
        let emb = self.patch.forward(ctx, patches)?;
        let all = ctx.tape.concat_rows(&[emb, ctx.p(self.cls_token)])?;
        let order: Vec<usize> = (0..b)
            .flat_map(|s| core::iter::once(b * t).chain(s * t..(s + 1) * t))
            .collect();
        let mut x = ctx.tape.gather_rows(all, &order)?;

        let mut moe = Vec::new();
        for (i, block) in self.blocks.iter().enumerate() {
            let (y, out) = block.forward(ctx, x, seq)?;
            x = y;
            if let Some(out) = out {
                moe.push(MoERecord {
                    block: i,
                    route: out.route,
                    decision: out.decision,
                });
            }
        }
        let cls_rows: Vec<usize> = (0..b).map(|s| s * seq).collect();
        let cls = ctx.tape.gather_rows(x, &cls_rows)?;
        let cls = self.norm.forward(ctx, cls)?;
        let logits = self.head.forward(ctx, cls)?;
        Ok(Forward {
            logits,
            moe,
            tokens_per_sample: seq,
        })
    }
}

/// Fully connected network over the flattened sample with ReLU between
/// layers. `widths` lists the input width, the hidden widths and the number
/// of classes.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T: Scalar = f64> {
    pub widths: Vec<usize>,
    pub params: ParamStore<T>,
    pub layers: Vec<Linear>,
}

/// Default widths for the synthetic task (`P·K = 40` inputs, 4 classes).
pub const MLP_WIDTHS: [usize; 4] = [40, 100, 100, 4];

pub fn build_mlp<T: Scalar>(widths: &[usize], seed: u64) -> Result<Mlp<T>> {
    if widths.len() < 2 || widths.contains(&0) {
        return Err(Error::config("mlp needs at least two positive widths"));
    }
    let mut rng = SeedTree::new(seed).stream(STREAM_INIT);
    let mut params = ParamStore::new();
    let layers = widths
        .windows(2)
        .enumerate()
        .map(|(i, w)| Linear::new(&mut params, &format!("fc{i}"), w[0], w[1], true, &mut rng))
        .collect();
    Ok(Mlp {
        widths: widths.to_vec(),
        params,
        layers,
    })
}

impl<T: Scalar> Classifier<T> for Mlp<T> {
    fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    fn num_classes(&self) -> usize {
        *self.widths.last().unwrap_or(&0)
    }

    fn forward(&self, ctx: &mut Ctx<'_, T>, inputs: &Tensor<T>) -> Result<Forward<T>> {
        let b = inputs.outer();
        let flat = inputs.clone().reshape([b, inputs.len() / b.max(1)])?;
        if flat.cols() != self.widths[0] {
            return Err(Error::ShapeMismatch {
                op: "mlp_forward",
                lhs: inputs.shape().to_vec(),
                rhs: vec![b, self.widths[0]],
            });
        }
        let mut x = ctx.tape.constant(flat);
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(ctx, x)?;
            if i + 1 < self.layers.len() {
                x = ctx.tape.relu(x)?;
            }
        }
        Ok(Forward {
            logits: x,
            moe: Vec::new(),
            tokens_per_sample: 1,
        })
    }
}

/// Two-layer fully convolutional network over the patch axis: each layer is
/// a convolution whose kernel spans exactly one patch, followed by global
/// average pooling over patches.
#[derive(Debug, Clone, PartialEq)]
pub struct Fcn<T: Scalar = f64> {
    pub params: ParamStore<T>,
    pub conv1: Linear,
    pub conv2: Linear,
}

/// Default number of filters of the first layer.
pub const FCN_FILTERS: usize = 20;

pub fn build_fcn<T: Scalar>(channels: usize, filters: usize, classes: usize, seed: u64) -> Result<Fcn<T>> {
    if channels == 0 || filters == 0 || classes == 0 {
        return Err(Error::config("fcn sizes must be positive"));
    }
    let mut rng = SeedTree::new(seed).stream(STREAM_INIT);
    let mut params = ParamStore::new();
    let conv1 = Linear::new(&mut params, "conv1", channels, filters, true, &mut rng);
    let conv2 = Linear::new(&mut params, "conv2", filters, classes, true, &mut rng);
    Ok(Fcn { params, conv1, conv2 })
}

impl<T: Scalar> Classifier<T> for Fcn<T> {
    fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    fn num_classes(&self) -> usize {
        self.conv2.out_dim
    }

    /// `inputs` are `[B×P×K]` patch sequences.
    fn forward(&self, ctx: &mut Ctx<'_, T>, inputs: &Tensor<T>) -> Result<Forward<T>> {
        let (b, p, k) = match *inputs.shape() {
            [b, p, k] => (b, p, k),
            _ => {
                return Err(Error::InvalidShape {
                    op: "fcn_forward",
                    shape: inputs.shape().to_vec(),
                    reason: "expected [B, P, K]",
                })
            }
        };
        if k != self.conv1.in_dim {
            return Err(Error::ShapeMismatch {
                op: "fcn_forward",
                lhs: inputs.shape().to_vec(),
                rhs: vec![b, p, self.conv1.in_dim],
            });
        }
        let rows = ctx.tape.constant(inputs.clone().reshape([b * p, k])?);
        let h = self.conv1.forward(ctx, rows)?;
        let h = ctx.tape.relu(h)?;
        let h = self.conv2.forward(ctx, h)?;
        let logits = ctx.tape.mean_groups(h, p)?;
        Ok(Forward {
            logits,
            moe: Vec::new(),
            tokens_per_sample: 1,
        })
    }
}

/// Serializable description of any supported model.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum Architecture {
    Gmoe(ModelConfig),
    Mlp { widths: Vec<usize> },
    Fcn { channels: usize, filters: usize, classes: usize },
}

impl Architecture {
    pub fn name(&self) -> &'static str {
        match self {
            Architecture::Gmoe(_) => "gmoe",
            Architecture::Mlp { .. } => "mlp",
            Architecture::Fcn { .. } => "fcn",
        }
    }

    pub fn build<T: Scalar>(&self, seed: u64) -> Result<Model<T>> {
        Ok(match self {
            Architecture::Gmoe(c) => Model::Gmoe(build_gmoe(c, seed)?),
            Architecture::Mlp { widths } => Model::Mlp(build_mlp(widths, seed)?),
            Architecture::Fcn {
                channels,
                filters,
                classes,
            } => Model::Fcn(build_fcn(*channels, *filters, *classes, seed)?),
        })
    }
}

/// Any supported model behind one [`Classifier`].
#[derive(Debug, Clone, PartialEq)]
pub enum Model<T: Scalar = f64> {
    Gmoe(GMoE<T>),
    Mlp(Mlp<T>),
    Fcn(Fcn<T>),
}

impl<T: Scalar> Model<T> {
    fn inner(&self) -> &dyn Classifier<T> {
        match self {
            Model::Gmoe(m) => m,
            Model::Mlp(m) => m,
            Model::Fcn(m) => m,
        }
    }
}

impl<T: Scalar> Classifier<T> for Model<T> {
    fn params(&self) -> &ParamStore<T> {
        self.inner().params()
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        match self {
            Model::Gmoe(m) => &mut m.params,
            Model::Mlp(m) => &mut m.params,
            Model::Fcn(m) => &mut m.params,
        }
    }

    fn num_classes(&self) -> usize {
        self.inner().num_classes()
    }

    fn forward(&self, ctx: &mut Ctx<'_, T>, inputs: &Tensor<T>) -> Result<Forward<T>> {
        self.inner().forward(ctx, inputs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{gradient_check_with, Difference};
    use crate::rng::standard_normal;
    use alloc::string::String;


    fn images(b: usize, cfg: &ModelConfig, seed: u64) -> Tensor<f64> {
        let mut rng = SeedTree::new(seed).stream("img");
        Tensor::from_fn([b, cfg.channels, cfg.image_height, cfg.image_width], |_| standard_normal(&mut rng))
    }

    #[test]
    fn placement_policies() {
        assert_eq!(resolve_placement(&Placement::LastTwo, 12).unwrap(), vec![8, 10]);
        assert_eq!(resolve_placement(&Placement::EveryTwo, 12).unwrap(), vec![0, 2, 4, 6, 8, 10]);
        assert!(resolve_placement(&Placement::None, 12).unwrap().is_empty());
        assert_eq!(resolve_placement(&Placement::LastTwo, 13).unwrap(), vec![8, 10]);
        assert_eq!(resolve_placement(&Placement::LastTwo, 4).unwrap(), vec![0, 2]);
        assert!(resolve_placement(&Placement::LastTwo, 3).is_err());
        assert!(resolve_placement(&Placement::EveryTwo, 1).is_err());
        assert!(resolve_placement(&Placement::Explicit(vec![1, 12]), 12).is_err());
        assert_eq!(Placement::parse("3, 1"), Some(Placement::Explicit(vec![3, 1])));
    }

    #[test]
    fn parameter_count_matches_shape_sum() {
        for cfg in [
            ModelConfig::tiny(3, 2, Placement::EveryTwo),
            ModelConfig::tiny(1, 1, Placement::None),
            ModelConfig {
                moe: RouterConfig::new(RouterKind::Linear, 4, 1),
                ..ModelConfig::tiny(4, 1, Placement::Explicit(vec![1]))
            },
        ] {
            let m = build_gmoe::<f64>(&cfg, 0).unwrap();
            let oracle: usize = m.params.tensors().iter().map(|t| t.shape().iter().product::<usize>()).sum();
            assert_eq!(cfg.param_count().unwrap(), oracle);
        }
    }

    #[test]
    fn invalid_configs_are_enumerated() {
        let mut cfg = ModelConfig::tiny(2, 3, Placement::EveryTwo);
        cfg.heads = 3;
        let msg = format!("{}", cfg.validate().unwrap_err());
        assert!(msg.contains("heads") && msg.contains("top-k"), "{msg}");
    }

    #[test]
    fn logits_shape_trace_and_determinism() {
        let cfg = ModelConfig::tiny(3, 2, Placement::EveryTwo);
        let m = build_gmoe::<f64>(&cfg, 1).unwrap();
        let x = images(5, &cfg, 2);
        let (a, trace) = m.predict(&x, None).unwrap();
        assert_eq!(a.shape(), &[5, 3]);
        assert_eq!(trace.layers.len(), 1);
        assert_eq!(trace.tokens(), 5 * 5);
        assert_eq!(trace.layers[0].decision.tokens(), trace.tokens());
        let (b, _) = m.predict(&x, None).unwrap();
        assert_eq!(a, b);
    }

    fn rename_expert(name: &str) -> String {
        name.replace(".moe.expert0.", ".ffn.")
    }

    #[test]
    fn single_expert_model_equals_plain_vit() {
        let cfg = ModelConfig::tiny(1, 1, Placement::EveryTwo);
        let gm = build_gmoe::<f64>(&cfg, 3).unwrap();
        let mut vit = build_gmoe::<f64>(&ModelConfig { placement: Placement::None, ..cfg.clone() }, 4).unwrap();
        for (name, t) in gm.params.iter() {
            if let Some(id) = vit.params.find(&rename_expert(name)) {
                *vit.params.get_mut(id) = t.clone();
            }
        }
        let x = images(3, &cfg, 5);
        assert_eq!(gm.predict(&x, None).unwrap().0, vit.predict(&x, None).unwrap().0);
    }

    #[test]
    fn zero_weights_leave_block_as_identity() {
        let cfg = ModelConfig::tiny(3, 2, Placement::EveryTwo);
        let mut m = build_gmoe::<f64>(&cfg, 6).unwrap();
        for (i, name) in m.params.clone().iter().map(|(n, _)| String::from(n)).enumerate() {
            if name.starts_with("block0.") && !name.contains("ln") && !name.contains("embedding") {
                m.params.tensors_mut()[i].data_mut().fill(0.0);
            }
        }
        let mut rng = SeedTree::new(7).stream("x");
        let x = Tensor::from_fn([4, 8], |_| standard_normal(&mut rng));
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &m.params, false);
        let xv = ctx.tape.constant(x.clone());
        let (y, d) = m.blocks[0].forward(&mut ctx, xv, 4).unwrap();
        assert_eq!(tape.value(y), &x);
        assert_eq!(d.unwrap().decision.tokens(), 4);
    }

    #[test]
    fn block_matches_hand_composition() {
        let cfg = ModelConfig::tiny(3, 2, Placement::EveryTwo);
        let m = build_gmoe::<f64>(&cfg, 8).unwrap();
        let mut rng = SeedTree::new(9).stream("x");
        let x = Tensor::from_fn([6, 8], |_| standard_normal(&mut rng));
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &m.params, false);
        let xv = ctx.tape.constant(x.clone());
        let (y, _) = m.blocks[0].forward(&mut ctx, xv, 3).unwrap();
        let y = tape.value(y).clone();

        let p = &m.params;
        let b = &m.blocks[0];
        let ln = |l: &LayerNorm, v: &Tensor<f64>| crate::tensor::layer_norm(v, p.get(l.gamma), p.get(l.beta), 1e-6).unwrap();
        let mut attn = Tensor::zeros([6, 8]);
        for s in 0..2 {
            let seq = x.select(&[3 * s, 3 * s + 1, 3 * s + 2]).unwrap();
            let mut t2 = Tape::new();
            let mut c2 = Ctx::new(&mut t2, p, false);
            let sv = c2.tape.constant(ln(&b.ln1, &seq));
            let o = b.attn.forward(&mut c2, sv, 3).unwrap();
            for r in 0..3 {
                attn.row_mut(3 * s + r).copy_from_slice(t2.value(o).row(r));
            }
        }
        let x1 = crate::tensor::add(&x, &attn).unwrap();
        let BlockFfn::Moe(moe) = &b.ffn else { panic!("block 0 carries an MoE layer") };
        let h = ln(&b.ln2, &x1);
        let d = moe.router.decide(p, &h, None).unwrap();
        let mut mix = Tensor::zeros([6, 8]);
        for (e, ex) in moe.experts.iter().enumerate() {
            let ye = ex.apply(p, &h).unwrap();
            for t in 0..6 {
                for (o, v) in mix.row_mut(t).iter_mut().zip(ye.row(t)) {
                    *o += d.gate_weights.at(t, e) * v;
                }
            }
        }
        let expect = crate::tensor::add(&x1, &mix).unwrap();
        assert!(y.max_abs_diff(&expect) <= 1e-12);
    }

    #[test]
    fn gradient_check_tiny_model() {
        let cfg = ModelConfig::tiny(3, 2, Placement::EveryTwo);
        let m = build_gmoe::<f64>(&cfg, 10).unwrap();
        let x = images(2, &cfg, 11);
        let f = |tape: &mut Tape<f64>, vars: &[Var]| {
            let mut ctx = Ctx::on_leaves(tape, vars)?.training_without_noise();
            let out = m.forward(&mut ctx, &x)?;
            let cls = ctx.tape.cross_entropy(out.logits, &[0, 2])?;
            let imp = crate::losses::balance_var(ctx.tape, out.moe[0].route.gates)?;
            let load = crate::losses::balance_var(ctx.tape, out.moe[0].route.load)?;
            let aux = ctx.tape.add(imp, load)?;
            crate::losses::total_var(ctx.tape, cls, Some(aux), 0.01)
        };
        let mut rng = SeedTree::new(12).stream("theta");
        let theta: Vec<Tensor<f64>> = m
            .params
            .tensors()
            .iter()
            .map(|t| crate::tensor::add(t, &Tensor::from_fn(t.shape().to_vec(), |_| 0.3 * standard_normal::<f64, _>(&mut rng))).unwrap())
            .collect();
        let r = gradient_check_with(f, &theta, 3e-3, Difference::Richardson).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn mlp_and_fcn_shapes_and_alignment() {
        let mlp = build_mlp::<f64>(&MLP_WIDTHS, 0).unwrap();
        let fcn = build_fcn::<f64>(4, FCN_FILTERS, 4, 0).unwrap();
        assert_eq!(mlp.layers.len(), 3);
        let mut rng = SeedTree::new(1).stream("x");
        let x = Tensor::from_fn([3, 10, 4], |_| standard_normal(&mut rng));
        let (lm, _) = mlp.predict(&x, None).unwrap();
        let (lf, _) = fcn.predict(&x, None).unwrap();
        assert_eq!(lm.shape(), &[3, 4]);
        assert_eq!(lf.shape(), &[3, 4]);

        let perm: Vec<usize> = vec![7, 3, 0, 9, 1, 5, 2, 8, 4, 6];
        let mut xp = x.clone();
        for s in 0..3 {
            for (i, &p) in perm.iter().enumerate() {
                for c in 0..4 {
                    xp.data_mut()[(s * 10 + i) * 4 + c] = x.data()[(s * 10 + p) * 4 + c];
                }
            }
        }
        assert!(fcn.predict(&xp, None).unwrap().0.max_abs_diff(&lf) <= 1e-9);

        let mut xs = x.clone();
        xs.data_mut().swap(0, 1);
        assert!(mlp.predict(&xs, None).unwrap().0.max_abs_diff(&lm) > 0.0);
    }
}
