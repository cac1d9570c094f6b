//! Full encoder assembly: embeddings, the residual layer stack, the tied
//! MLM head, both sequence-classification strategies, and max-length
//! extension.

use crate::attention::{
    attend, classify_attend, AttentionNodes, AttentionParams, AttentionVariant, AttnContext,
    PadMask, INIT_STD,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::partition::{t5_default_boundaries, MaskCache, PartitionMask, PartitionSpec};
use crate::rng::{derive_seed, Rng};
use crate::tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

/// Reserved vocabulary ids.
pub const CLS_ID: usize = 0;
pub const SEP_ID: usize = 1;
pub const PAD_ID: usize = 2;
pub const MASK_ID: usize = 3;
pub const SPECIAL_TOKENS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifyStrategy {
    /// Read the final hidden state at the [CLS] position.
    ClsToken,
    /// Re-pool every layer's hidden states from a learnt seed vector.
    Pooled,
}

impl ClassifyStrategy {
    pub fn name(self) -> &'static str {
        match self {
            ClassifyStrategy::ClsToken => "cls",
            ClassifyStrategy::Pooled => "pooled",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "cls" | "cls_token" => Ok(ClassifyStrategy::ClsToken),
            "pooled" => Ok(ClassifyStrategy::Pooled),
            other => Err(Error::Config(format!("unknown classify strategy '{other}'"))),
        }
    }
}

fn default_classes() -> usize {
    2
}

fn default_dropout() -> f64 {
    0.0
}

/// Everything needed to build a model. Unknown keys in config files are
/// rejected.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: AttentionVariant,
    pub layers: usize,
    pub hidden: usize,
    /// Heads for softmax-score variants, parts for the masked family.
    pub heads: usize,
    /// Feed-forward inner size; 4x hidden when omitted.
    #[serde(default)]
    pub ffn: Option<usize>,
    pub vocab: usize,
    pub max_len: usize,
    /// Learned absolute position embeddings; only the BERT and RAB
    /// configurations may enable them.
    pub positions: bool,
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default = "ClassifyStrategy::default_strategy")]
    pub classify: ClassifyStrategy,
    /// RPE clip radius c; the table has 2c-1 rows.
    #[serde(default)]
    pub rpe_clip: Option<usize>,
    #[serde(default)]
    pub rab_buckets: Option<usize>,
    #[serde(default)]
    pub rab_max_distance: Option<usize>,
    /// Per-layer overrides for the partition schedule.
    #[serde(default)]
    pub partition_alpha: Option<Vec<f64>>,
    #[serde(default)]
    pub partition_beta: Option<Vec<f64>>,
    #[serde(default = "default_dropout")]
    pub attention_dropout: f64,
}

impl ClassifyStrategy {
    fn default_strategy() -> Self {
        ClassifyStrategy::Pooled
    }
}

impl ModelConfig {
    pub fn ffn_size(&self) -> usize {
        self.ffn.unwrap_or(4 * self.hidden)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 {
            return Err(Error::Config("hidden and heads must be positive".into()));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if self.vocab <= SPECIAL_TOKENS {
            return Err(Error::Config(format!(
                "vocab {} leaves no room after the {SPECIAL_TOKENS} reserved ids",
                self.vocab
            )));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be >= 1".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config("classes must be >= 2".into()));
        }
        if self.positions
            && !matches!(
                self.variant,
                AttentionVariant::MultiHeadSoftmax | AttentionVariant::Rab
            )
        {
            return Err(Error::Config(format!(
                "position embeddings are only valid for multihead_softmax or rab, not {}",
                self.variant.config_name()
            )));
        }
        if self.variant.uses_partition_mask() && (self.heads % 2 != 0 || self.heads < 2) {
            return Err(Error::Config(format!(
                "partitioned variants need an even part count >= 2, got {}",
                self.heads
            )));
        }
        if matches!(self.variant, AttentionVariant::Rpe) {
            if self.heads != 1 {
                return Err(Error::Config("rpe runs single-headed; set heads = 1".into()));
            }
            match self.rpe_clip {
                Some(c) if c >= 1 => {}
                _ => return Err(Error::Config("rpe requires rpe_clip >= 1".into())),
            }
        }
        if matches!(self.variant, AttentionVariant::Rab) {
            let m = self.rab_buckets.unwrap_or(32);
            let dist = self.rab_max_distance.unwrap_or(128);
            t5_default_boundaries(m, dist)?;
        }
        if !(0.0..1.0).contains(&self.attention_dropout) {
            return Err(Error::Config(format!(
                "attention_dropout {} outside [0, 1)",
                self.attention_dropout
            )));
        }
        match (&self.partition_alpha, &self.partition_beta) {
            (None, None) => {}
            (Some(a), Some(b)) => {
                if a.len() != self.layers || b.len() != self.layers {
                    return Err(Error::Config(format!(
                        "partition overrides need one alpha/beta per layer ({})",
                        self.layers
                    )));
                }
            }
            _ => {
                return Err(Error::Config(
                    "partition_alpha and partition_beta must be given together".into(),
                ))
            }
        }
        if self.variant.uses_partition_mask() && self.layers > 0 {
            self.partition_spec()?;
        }
        Ok(())
    }

    /// Partition spec for masked variants (None otherwise or with no layers).
    pub fn partition_spec(&self) -> Result<Option<PartitionSpec>> {
        if !self.variant.uses_partition_mask() || self.layers == 0 {
            return Ok(None);
        }
        let spec = match (&self.partition_alpha, &self.partition_beta) {
            (Some(a), Some(b)) => PartitionSpec::with_overrides(self.heads, a, b)?,
            _ => PartitionSpec::new(self.heads, self.layers)?,
        };
        Ok(Some(spec))
    }

    pub fn rab_boundary_values(&self) -> Result<Option<Vec<f64>>> {
        if !matches!(self.variant, AttentionVariant::Rab) {
            return Ok(None);
        }
        let m = self.rab_buckets.unwrap_or(32);
        let dist = self.rab_max_distance.unwrap_or(128);
        Ok(Some(t5_default_boundaries(m, dist)?))
    }

    pub fn rpe_rows(&self) -> usize {
        self.rpe_clip.map(|c| 2 * c - 1).unwrap_or(0)
    }
}

/// How a parameter behaves under weight decay and the parameter-count
/// convention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    WordEmbed,
    PosEmbed,
    /// Dense weight matrix inside a layer (attention projections, FFN).
    LayerWeight,
    /// Learnt relative tables inside a layer: partition embeddings R,
    /// RPE tables, RAB bucket weights.
    RelTable,
    Bias,
    LayerNorm,
    /// Weight matrices outside the layer stack (MLM transform, classifier).
    HeadWeight,
    /// The learnt pooling seed vector.
    Seed,
}

impl ParamKind {
    /// Decoupled weight decay applies to dense weight matrices only.
    pub fn decayed(self) -> bool {
        matches!(self, ParamKind::LayerWeight | ParamKind::HeadWeight)
    }

    /// The reporting convention counts layer-stack weights and relative
    /// tables, excluding all embeddings, biases and layer norms.
    pub fn counted(self) -> bool {
        matches!(self, ParamKind::LayerWeight | ParamKind::RelTable)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNormParams<T: Scalar> {
    pub gain: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> LayerNormParams<T> {
    fn init(d: usize) -> Self {
        LayerNormParams {
            gain: Tensor::full(&[d], T::ONE),
            bias: Tensor::zeros(&[d]),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerParams<T: Scalar> {
    pub attn: AttentionParams<T>,
    pub ffn_w1: Tensor<T>,
    pub ffn_b1: Tensor<T>,
    pub ffn_w2: Tensor<T>,
    pub ffn_b2: Tensor<T>,
    pub ln1: LayerNormParams<T>,
    pub ln2: LayerNormParams<T>,
}

#[derive(Debug, Clone)]
pub struct MlmHead<T: Scalar> {
    pub transform_w: Tensor<T>,
    pub transform_b: Tensor<T>,
    pub ln: LayerNormParams<T>,
    /// Output bias over the vocabulary; the projection itself is tied to the
    /// word embeddings.
    pub out_bias: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct EncoderParams<T: Scalar> {
    pub word_embed: Tensor<T>,
    pub pos_embed: Option<Tensor<T>>,
    pub input_ln: LayerNormParams<T>,
    pub layers: Vec<LayerParams<T>>,
    pub mlm: MlmHead<T>,
    pub pool_seed: Tensor<T>,
    pub classifier_w: Tensor<T>,
    pub classifier_b: Tensor<T>,
}

fn normal<T: Scalar>(shape: &[usize], rng: &mut Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64(rng.normal() * INIT_STD))
}

impl<T: Scalar> EncoderParams<T> {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::with_stream(seed, 0x9a7a);
        let d = config.hidden;
        let ffn = config.ffn_size();
        let word_embed = normal(&[config.vocab, d], &mut rng);
        let pos_embed = config
            .positions
            .then(|| normal(&[config.max_len, d], &mut rng));
        let input_ln = LayerNormParams::init(d);
        let mut layers = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            let attn = AttentionParams::init(
                config.variant,
                d,
                config.heads,
                config.rpe_rows(),
                config.rab_buckets.unwrap_or(32),
                &mut rng,
            );
            layers.push(LayerParams {
                attn,
                ffn_w1: normal(&[d, ffn], &mut rng),
                ffn_b1: Tensor::zeros(&[ffn]),
                ffn_w2: normal(&[ffn, d], &mut rng),
                ffn_b2: Tensor::zeros(&[d]),
                ln1: LayerNormParams::init(d),
                ln2: LayerNormParams::init(d),
            });
        }
        let mlm = MlmHead {
            transform_w: normal(&[d, d], &mut rng),
            transform_b: Tensor::zeros(&[d]),
            ln: LayerNormParams::init(d),
            out_bias: Tensor::zeros(&[config.vocab]),
        };
        let pool_seed = normal(&[1, d], &mut rng);
        let classifier_w = normal(&[d, config.classes], &mut rng);
        let classifier_b = Tensor::zeros(&[config.classes]);
        Ok(EncoderParams {
            word_embed,
            pos_embed,
            input_ln,
            layers,
            mlm,
            pool_seed,
            classifier_w,
            classifier_b,
        })
    }

    /// Canonical walk over every trainable tensor. Binding and the optimizer
    /// rely on this order; it must match `bind` exactly.
    pub fn visit(&self, f: &mut dyn FnMut(String, &Tensor<T>, ParamKind)) {
        f("embed.word".into(), &self.word_embed, ParamKind::WordEmbed);
        if let Some(p) = &self.pos_embed {
            f("embed.pos".into(), p, ParamKind::PosEmbed);
        }
        f("embed.ln.gain".into(), &self.input_ln.gain, ParamKind::LayerNorm);
        f("embed.ln.bias".into(), &self.input_ln.bias, ParamKind::LayerNorm);
        for (k, layer) in self.layers.iter().enumerate() {
            let a = &layer.attn;
            f(format!("layer{k}.attn.w_q"), &a.w_q, ParamKind::LayerWeight);
            f(format!("layer{k}.attn.b_q"), &a.b_q, ParamKind::Bias);
            if let Some(w) = &a.w_k {
                f(format!("layer{k}.attn.w_k"), w, ParamKind::LayerWeight);
            }
            if let Some(b) = &a.b_k {
                f(format!("layer{k}.attn.b_k"), b, ParamKind::Bias);
            }
            f(format!("layer{k}.attn.w_v"), &a.w_v, ParamKind::LayerWeight);
            f(format!("layer{k}.attn.b_v"), &a.b_v, ParamKind::Bias);
            f(format!("layer{k}.attn.w_o"), &a.w_o, ParamKind::LayerWeight);
            f(format!("layer{k}.attn.b_o"), &a.b_o, ParamKind::Bias);
            if let Some(r) = &a.part_embed {
                f(format!("layer{k}.attn.part_embed"), r, ParamKind::RelTable);
            }
            if let Some(t) = &a.rpe_table {
                f(format!("layer{k}.attn.rpe_table"), t, ParamKind::RelTable);
            }
            if let Some(w) = &a.rab_weights {
                f(format!("layer{k}.attn.rab_weights"), w, ParamKind::RelTable);
            }
            f(format!("layer{k}.ffn.w1"), &layer.ffn_w1, ParamKind::LayerWeight);
            f(format!("layer{k}.ffn.b1"), &layer.ffn_b1, ParamKind::Bias);
            f(format!("layer{k}.ffn.w2"), &layer.ffn_w2, ParamKind::LayerWeight);
            f(format!("layer{k}.ffn.b2"), &layer.ffn_b2, ParamKind::Bias);
            f(format!("layer{k}.ln1.gain"), &layer.ln1.gain, ParamKind::LayerNorm);
            f(format!("layer{k}.ln1.bias"), &layer.ln1.bias, ParamKind::LayerNorm);
            f(format!("layer{k}.ln2.gain"), &layer.ln2.gain, ParamKind::LayerNorm);
            f(format!("layer{k}.ln2.bias"), &layer.ln2.bias, ParamKind::LayerNorm);
        }
        f("mlm.transform_w".into(), &self.mlm.transform_w, ParamKind::HeadWeight);
        f("mlm.transform_b".into(), &self.mlm.transform_b, ParamKind::Bias);
        f("mlm.ln.gain".into(), &self.mlm.ln.gain, ParamKind::LayerNorm);
        f("mlm.ln.bias".into(), &self.mlm.ln.bias, ParamKind::LayerNorm);
        f("mlm.out_bias".into(), &self.mlm.out_bias, ParamKind::Bias);
        f("pool.seed".into(), &self.pool_seed, ParamKind::Seed);
        f("classifier.w".into(), &self.classifier_w, ParamKind::HeadWeight);
        f("classifier.b".into(), &self.classifier_b, ParamKind::Bias);
    }

    /// Mutable walk in the same canonical order.
    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor<T>, ParamKind)) {
        f(&mut self.word_embed, ParamKind::WordEmbed);
        if let Some(p) = &mut self.pos_embed {
            f(p, ParamKind::PosEmbed);
        }
        f(&mut self.input_ln.gain, ParamKind::LayerNorm);
        f(&mut self.input_ln.bias, ParamKind::LayerNorm);
        for layer in self.layers.iter_mut() {
            let a = &mut layer.attn;
            f(&mut a.w_q, ParamKind::LayerWeight);
            f(&mut a.b_q, ParamKind::Bias);
            if let Some(w) = &mut a.w_k {
                f(w, ParamKind::LayerWeight);
            }
            if let Some(b) = &mut a.b_k {
                f(b, ParamKind::Bias);
            }
            f(&mut a.w_v, ParamKind::LayerWeight);
            f(&mut a.b_v, ParamKind::Bias);
            f(&mut a.w_o, ParamKind::LayerWeight);
            f(&mut a.b_o, ParamKind::Bias);
            if let Some(r) = &mut a.part_embed {
                f(r, ParamKind::RelTable);
            }
            if let Some(t) = &mut a.rpe_table {
                f(t, ParamKind::RelTable);
            }
            if let Some(w) = &mut a.rab_weights {
                f(w, ParamKind::RelTable);
            }
            f(&mut layer.ffn_w1, ParamKind::LayerWeight);
            f(&mut layer.ffn_b1, ParamKind::Bias);
            f(&mut layer.ffn_w2, ParamKind::LayerWeight);
            f(&mut layer.ffn_b2, ParamKind::Bias);
            f(&mut layer.ln1.gain, ParamKind::LayerNorm);
            f(&mut layer.ln1.bias, ParamKind::LayerNorm);
            f(&mut layer.ln2.gain, ParamKind::LayerNorm);
            f(&mut layer.ln2.bias, ParamKind::LayerNorm);
        }
        f(&mut self.mlm.transform_w, ParamKind::HeadWeight);
        f(&mut self.mlm.transform_b, ParamKind::Bias);
        f(&mut self.mlm.ln.gain, ParamKind::LayerNorm);
        f(&mut self.mlm.ln.bias, ParamKind::LayerNorm);
        f(&mut self.mlm.out_bias, ParamKind::Bias);
        f(&mut self.pool_seed, ParamKind::Seed);
        f(&mut self.classifier_w, ParamKind::HeadWeight);
        f(&mut self.classifier_b, ParamKind::Bias);
    }

    pub fn total_values(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t, _| n += t.numel());
        n
    }
}

/// Graph leaves for the whole encoder, in the `visit` order.
pub struct BoundEncoder {
    pub word_embed: NodeId,
    pub pos_embed: Option<NodeId>,
    pub input_ln: (NodeId, NodeId),
    pub layers: Vec<BoundLayer>,
    pub mlm_transform: (NodeId, NodeId),
    pub mlm_ln: (NodeId, NodeId),
    pub mlm_out_bias: NodeId,
    pub pool_seed: NodeId,
    pub classifier: (NodeId, NodeId),
    /// Every parameter leaf in canonical order, for the optimizer.
    pub flat: Vec<NodeId>,
}

pub struct BoundLayer {
    pub attn: AttentionNodes,
    pub ffn_w1: NodeId,
    pub ffn_b1: NodeId,
    pub ffn_w2: NodeId,
    pub ffn_b2: NodeId,
    pub ln1: (NodeId, NodeId),
    pub ln2: (NodeId, NodeId),
}

/// A model: config + parameters + the constant-mask cache.
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub params: EncoderParams<T>,
    spec: Option<PartitionSpec>,
    masks: MaskCache<T>,
    rab_boundaries: Option<Vec<f64>>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = EncoderParams::init(&config, seed)?;
        Self::from_parts(config, params)
    }

    pub fn from_parts(config: ModelConfig, params: EncoderParams<T>) -> Result<Self> {
        config.validate()?;
        let spec = config.partition_spec()?;
        let rab_boundaries = config.rab_boundary_values()?;
        Ok(Model {
            config,
            params,
            spec,
            masks: MaskCache::new(),
            rab_boundaries,
        })
    }

    pub fn partition_spec(&self) -> Option<&PartitionSpec> {
        self.spec.as_ref()
    }

    pub fn rab_boundaries(&self) -> Option<&[f64]> {
        self.rab_boundaries.as_deref()
    }

    pub fn bind(&self, g: &mut Graph<T>) -> BoundEncoder {
        let mut flat = Vec::new();
        fn reg<T: Scalar>(g: &mut Graph<T>, flat: &mut Vec<NodeId>, t: &Tensor<T>) -> NodeId {
            let id = g.param(t.clone());
            flat.push(id);
            id
        }
        let p = &self.params;
        let word_embed = reg(g, &mut flat, &p.word_embed);
        let pos_embed = p.pos_embed.as_ref().map(|t| reg(g, &mut flat, t));
        let input_ln = (
            reg(g, &mut flat, &p.input_ln.gain),
            reg(g, &mut flat, &p.input_ln.bias),
        );
        let mut layers = Vec::with_capacity(p.layers.len());
        for layer in &p.layers {
            let attn = layer.attn.bind(g, &mut flat);
            layers.push(BoundLayer {
                attn,
                ffn_w1: reg(g, &mut flat, &layer.ffn_w1),
                ffn_b1: reg(g, &mut flat, &layer.ffn_b1),
                ffn_w2: reg(g, &mut flat, &layer.ffn_w2),
                ffn_b2: reg(g, &mut flat, &layer.ffn_b2),
                ln1: (
                    reg(g, &mut flat, &layer.ln1.gain),
                    reg(g, &mut flat, &layer.ln1.bias),
                ),
                ln2: (
                    reg(g, &mut flat, &layer.ln2.gain),
                    reg(g, &mut flat, &layer.ln2.bias),
                ),
            });
        }
        let mlm_transform = (
            reg(g, &mut flat, &p.mlm.transform_w),
            reg(g, &mut flat, &p.mlm.transform_b),
        );
        let mlm_ln = (
            reg(g, &mut flat, &p.mlm.ln.gain),
            reg(g, &mut flat, &p.mlm.ln.bias),
        );
        let mlm_out_bias = reg(g, &mut flat, &p.mlm.out_bias);
        let pool_seed = reg(g, &mut flat, &p.pool_seed);
        let classifier = (
            reg(g, &mut flat, &p.classifier_w),
            reg(g, &mut flat, &p.classifier_b),
        );
        BoundEncoder {
            word_embed,
            pos_embed,
            input_ln,
            layers,
            mlm_transform,
            mlm_ln,
            mlm_out_bias,
            pool_seed,
            classifier,
            flat,
        }
    }

    fn mask_for(&self, l: usize, layer: usize) -> Result<Option<PartitionMask<T>>> {
        match &self.spec {
            Some(spec) => Ok(Some(self.masks.get(l, layer, spec)?)),
            None => Ok(None),
        }
    }

    fn context<'a>(
        &'a self,
        mask: Option<&'a PartitionMask<T>>,
        dropout_seed: Option<u64>,
        layer: usize,
    ) -> AttnContext<'a, T> {
        let mut ctx = AttnContext::new(self.config.heads);
        ctx.mask = mask;
        ctx.rab_boundaries = self.rab_boundaries.as_deref();
        ctx.rpe_clip = self.config.rpe_clip;
        if self.config.attention_dropout > 0.0 {
            ctx.dropout = dropout_seed.map(|s| {
                (
                    self.config.attention_dropout,
                    derive_seed(s, 0xd0, layer as u64),
                )
            });
        }
        ctx
    }

    /// X^0: layernorm(E(w_i) + P[i]) per row; P only when positions are on.
    pub fn embed_input(
        &self,
        g: &mut Graph<T>,
        bound: &BoundEncoder,
        tokens: &[usize],
    ) -> Result<NodeId> {
        if tokens.len() > self.config.max_len {
            return Err(Error::Data(format!(
                "sequence length {} exceeds max_len {}",
                tokens.len(),
                self.config.max_len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab) {
            return Err(Error::Data(format!(
                "token id {bad} out of vocab {}",
                self.config.vocab
            )));
        }
        let mut x = g.gather(bound.word_embed, tokens)?;
        if let Some(pos) = bound.pos_embed {
            let idx: Vec<usize> = (0..tokens.len()).collect();
            let p = g.gather(pos, &idx)?;
            x = g.add(x, p)?;
        }
        g.layer_norm(x, bound.input_ln.0, bound.input_ln.1)
    }

    /// One residual block: h = LN(x + attend(x)); out = LN(h + FFN(h)).
    pub fn layer_forward(
        &self,
        g: &mut Graph<T>,
        layer: &BoundLayer,
        layer_idx: usize,
        x: NodeId,
        pad: &PadMask,
        dropout_seed: Option<u64>,
    ) -> Result<NodeId> {
        let l = g.value(x).shape()[0];
        let mask = self.mask_for(l, layer_idx)?;
        let ctx = self.context(mask.as_ref(), dropout_seed, layer_idx);
        let attended = attend(g, self.config.variant, x, &layer.attn, pad, &ctx)?;
        let res1 = g.add(x, attended)?;
        let h = g.layer_norm(res1, layer.ln1.0, layer.ln1.1)?;
        let ff1 = g.matmul(h, layer.ffn_w1)?;
        let ff1b = g.add(ff1, layer.ffn_b1)?;
        let act = g.gelu(ff1b);
        let ff2 = g.matmul(act, layer.ffn_w2)?;
        let ff2b = g.add(ff2, layer.ffn_b2)?;
        let res2 = g.add(h, ff2b)?;
        g.layer_norm(res2, layer.ln2.0, layer.ln2.1)
    }

    /// All hidden states X^0 .. X^L.
    pub fn encode(
        &self,
        g: &mut Graph<T>,
        bound: &BoundEncoder,
        tokens: &[usize],
        pad: &PadMask,
        dropout_seed: Option<u64>,
    ) -> Result<Vec<NodeId>> {
        if pad.len() != tokens.len() {
            return Err(Error::Shape(format!(
                "pad mask length {} vs {} tokens",
                pad.len(),
                tokens.len()
            )));
        }
        let mut states = Vec::with_capacity(self.config.layers + 1);
        let mut x = self.embed_input(g, bound, tokens)?;
        states.push(x);
        for (k, layer) in bound.layers.iter().enumerate() {
            x = self.layer_forward(g, layer, k, x, pad, dropout_seed)?;
            states.push(x);
        }
        Ok(states)
    }

    /// Logits for the requested positions of X^L: transform, layer norm,
    /// projection tied to the word embeddings plus a vocab bias.
    pub fn mlm_logits(
        &self,
        g: &mut Graph<T>,
        bound: &BoundEncoder,
        final_state: NodeId,
        positions: &[usize],
    ) -> Result<NodeId> {
        let l = g.value(final_state).shape()[0];
        if let Some(&bad) = positions.iter().find(|&&p| p >= l) {
            return Err(Error::Data(format!(
                "masked position {bad} out of sequence length {l}"
            )));
        }
        let rows = g.gather(final_state, positions)?;
        let t = g.matmul(rows, bound.mlm_transform.0)?;
        let tb = g.add(t, bound.mlm_transform.1)?;
        let ln = g.layer_norm(tb, bound.mlm_ln.0, bound.mlm_ln.1)?;
        let et = g.transpose_last(bound.word_embed)?;
        let proj = g.matmul(ln, et)?;
        g.add(proj, bound.mlm_out_bias)
    }

    /// Class scores from the [CLS] position of the final state.
    pub fn classify_cls(
        &self,
        g: &mut Graph<T>,
        bound: &BoundEncoder,
        final_state: NodeId,
    ) -> Result<NodeId> {
        let row = g.gather(final_state, &[0])?;
        let scores = g.matmul(row, bound.classifier.0)?;
        g.add(scores, bound.classifier.1)
    }

    /// Class scores from the re-pooled path: y^0 is the learnt seed; each
    /// layer pools its input state and pushes y through the layer's FFN and
    /// layer norms, mirroring the token path.
    pub fn classify_pooled(
        &self,
        g: &mut Graph<T>,
        bound: &BoundEncoder,
        states: &[NodeId],
        pad: &PadMask,
    ) -> Result<NodeId> {
        if states.len() != self.config.layers + 1 {
            return Err(Error::Shape(format!(
                "expected {} hidden states, got {}",
                self.config.layers + 1,
                states.len()
            )));
        }
        let mut y = bound.pool_seed;
        for (k, layer) in bound.layers.iter().enumerate() {
            let ctx = AttnContext::new(self.config.heads);
            let pooled = classify_attend(
                g,
                self.config.variant,
                y,
                states[k],
                &layer.attn,
                pad,
                &ctx,
            )?;
            let res1 = g.add(y, pooled)?;
            let h = g.layer_norm(res1, layer.ln1.0, layer.ln1.1)?;
            let ff1 = g.matmul(h, layer.ffn_w1)?;
            let ff1b = g.add(ff1, layer.ffn_b1)?;
            let act = g.gelu(ff1b);
            let ff2 = g.matmul(act, layer.ffn_w2)?;
            let ff2b = g.add(ff2, layer.ffn_b2)?;
            let res2 = g.add(h, ff2b)?;
            y = g.layer_norm(res2, layer.ln2.0, layer.ln2.1)?;
        }
        let scores = g.matmul(y, bound.classifier.0)?;
        g.add(scores, bound.classifier.1)
    }

    pub fn classify(
        &self,
        g: &mut Graph<T>,
        bound: &BoundEncoder,
        states: &[NodeId],
        pad: &PadMask,
    ) -> Result<NodeId> {
        match self.config.classify {
            ClassifyStrategy::ClsToken => {
                self.classify_cls(g, bound, *states.last().expect("states nonempty"))
            }
            ClassifyStrategy::Pooled => self.classify_pooled(g, bound, states, pad),
        }
    }

    /// Fresh classification head for a new task with `classes` outputs.
    pub fn reset_classifier(&mut self, classes: usize, seed: u64) -> Result<()> {
        if classes < 2 {
            return Err(Error::Config("classes must be >= 2".into()));
        }
        let mut rng = Rng::with_stream(seed, 0xc1a5);
        self.params.classifier_w = normal(&[self.config.hidden, classes], &mut rng);
        self.params.classifier_b = Tensor::zeros(&[classes]);
        self.config.classes = classes;
        Ok(())
    }

    /// Grow max_len. Mask-based variants and RPE add zero parameters (the
    /// mask is rebuilt lazily; clipped offsets reuse edge rows). Position
    /// embeddings grow with seeded random rows.
    pub fn extend_max_length(&mut self, new_len: usize, seed: u64) -> Result<()> {
        if new_len < self.config.max_len {
            return Err(Error::Config(format!(
                "cannot shrink max_len {} to {new_len}",
                self.config.max_len
            )));
        }
        if let Some(pos) = &mut self.params.pos_embed {
            let old = self.config.max_len;
            let d = self.config.hidden;
            let mut rng = Rng::with_stream(seed, 0xe7e);
            let mut data = pos.data().to_vec();
            for _ in old * d..new_len * d {
                data.push(T::from_f64(rng.normal() * INIT_STD));
            }
            *pos = Tensor::new(vec![new_len, d], data)?;
        }
        self.config.max_len = new_len;
        Ok(())
    }
}
