//! Self-attention variants as pure layer computations on the graph:
//! multi-head softmax (the BERT baseline), partition-masked multi-head,
//! one-head softmax/sigmoid, partition-bias, full Shatter, relative position
//! embeddings (RPE), and relative attention bias (RAB).

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::partition::{bucket_index, validate_boundaries, PartitionMask};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// Epsilon inside the L2 score normalization (added as eps^2 under the
/// square root, so all-zero rows stay zero and the op is differentiable).
pub const ATTENTION_L2_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionVariant {
    /// Vanilla multi-head softmax attention (BERT when combined with
    /// position embeddings, the No_Position ablation without them).
    MultiHeadSoftmax,
    /// Multi-head softmax with the constant partition mask multiplied into
    /// the scores.
    PartMask,
    /// Single score sheet via softmax, no key projection, rank-3 values.
    OneHeadSoftmax,
    /// Single score sheet via L2-normalized sigmoid, no key projection.
    OneHeadSigmoid,
    /// One-head sigmoid plus the partition-embedding score bias.
    PartBias,
    /// Full model: sigmoid scores with partition bias, partition mask, and
    /// the partition-embedding value contribution.
    Shatter,
    /// Relative position embeddings contributing to keys and values
    /// (single-headed; offsets beyond the clip radius share edge rows).
    Rpe,
    /// Bucketed relative attention bias added to multi-head scores.
    Rab,
}

pub const ALL_VARIANTS: [AttentionVariant; 8] = [
    AttentionVariant::MultiHeadSoftmax,
    AttentionVariant::PartMask,
    AttentionVariant::OneHeadSoftmax,
    AttentionVariant::OneHeadSigmoid,
    AttentionVariant::PartBias,
    AttentionVariant::Shatter,
    AttentionVariant::Rpe,
    AttentionVariant::Rab,
];

impl AttentionVariant {
    pub fn config_name(self) -> &'static str {
        match self {
            AttentionVariant::MultiHeadSoftmax => "multihead_softmax",
            AttentionVariant::PartMask => "part_mask",
            AttentionVariant::OneHeadSoftmax => "onehead_softmax",
            AttentionVariant::OneHeadSigmoid => "onehead_sigmoid",
            AttentionVariant::PartBias => "part_bias",
            AttentionVariant::Shatter => "shatter",
            AttentionVariant::Rpe => "rpe",
            AttentionVariant::Rab => "rab",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        ALL_VARIANTS
            .into_iter()
            .find(|v| v.config_name() == name)
            .ok_or_else(|| Error::Config(format!("unknown attention variant '{name}'")))
    }

    /// One-head variants drop the key projection entirely.
    pub fn uses_w_k(self) -> bool {
        matches!(
            self,
            AttentionVariant::MultiHeadSoftmax
                | AttentionVariant::PartMask
                | AttentionVariant::Rab
                | AttentionVariant::Rpe
        )
    }

    pub fn uses_partition_mask(self) -> bool {
        matches!(
            self,
            AttentionVariant::PartMask
                | AttentionVariant::OneHeadSoftmax
                | AttentionVariant::OneHeadSigmoid
                | AttentionVariant::PartBias
                | AttentionVariant::Shatter
        )
    }

    pub fn uses_part_embed(self) -> bool {
        matches!(self, AttentionVariant::PartBias | AttentionVariant::Shatter)
    }

    pub fn sigmoid_scored(self) -> bool {
        matches!(
            self,
            AttentionVariant::OneHeadSigmoid | AttentionVariant::PartBias | AttentionVariant::Shatter
        )
    }

    /// Score denominators: sqrt(d/n) where scores are computed per head,
    /// sqrt(d) where a single full-width score sheet is computed (all
    /// one-head variants and RPE).
    pub fn one_head_scored(self) -> bool {
        matches!(
            self,
            AttentionVariant::OneHeadSoftmax
                | AttentionVariant::OneHeadSigmoid
                | AttentionVariant::PartBias
                | AttentionVariant::Shatter
                | AttentionVariant::Rpe
        )
    }

    pub fn score_multiplier<T: Scalar>(self, d: usize, n: usize) -> T {
        let denom = if self.one_head_scored() {
            (d as f64).sqrt()
        } else {
            (d as f64 / n as f64).sqrt()
        };
        T::from_f64(1.0 / denom)
    }

    /// Whether the model injects order through the partition mask or a
    /// relative formulation (and must therefore be shift invariant).
    pub fn shift_invariant(self) -> bool {
        self.uses_partition_mask() || matches!(self, AttentionVariant::Rpe)
    }
}

/// Validity flags per position. Padded keys are excluded from attention and
/// padded query rows produce zero output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PadMask {
    valid: Vec<bool>,
}

impl PadMask {
    pub fn all_valid(len: usize) -> Self {
        PadMask {
            valid: vec![true; len],
        }
    }

    /// First `valid_len` positions valid, the rest padding.
    pub fn prefix(len: usize, valid_len: usize) -> Self {
        PadMask {
            valid: (0..len).map(|i| i < valid_len).collect(),
        }
    }

    pub fn from_bools(valid: Vec<bool>) -> Result<Self> {
        if !valid.is_empty() && !valid.iter().any(|&v| v) {
            return Err(Error::Data("pad mask with no valid position".into()));
        }
        Ok(PadMask { valid })
    }

    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    pub fn is_valid(&self, i: usize) -> bool {
        self.valid[i]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// [l] additive bias: 0 on valid keys, -inf on padding.
    pub fn key_bias<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn(&[self.len()], |i| {
            if self.valid[i] {
                T::ZERO
            } else {
                T::neg_infinity()
            }
        })
    }

    /// [l] multiplicative keep mask: 1 on valid keys, 0 on padding.
    pub fn key_keep<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn(&[self.len()], |i| if self.valid[i] { T::ONE } else { T::ZERO })
    }

    /// [l, 1] keep mask for query rows.
    pub fn row_keep<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn(&[self.len(), 1], |i| if self.valid[i] { T::ONE } else { T::ZERO })
    }
}

/// Trainable tensors of one attention layer. Exactly the fields the variant
/// demands are populated; one-head variants never allocate a key projection.
#[derive(Debug, Clone)]
pub struct AttentionParams<T: Scalar> {
    pub w_q: Tensor<T>,
    pub b_q: Tensor<T>,
    pub w_k: Option<Tensor<T>>,
    pub b_k: Option<Tensor<T>>,
    pub w_v: Tensor<T>,
    pub b_v: Tensor<T>,
    pub w_o: Tensor<T>,
    pub b_o: Tensor<T>,
    /// Partition embeddings R (n x d), Shatter family only.
    pub part_embed: Option<Tensor<T>>,
    /// RPE table ((2c-1) x d).
    pub rpe_table: Option<Tensor<T>>,
    /// RAB bucket biases (m x n).
    pub rab_weights: Option<Tensor<T>>,
}

pub const INIT_STD: f64 = 0.02;

fn normal_tensor<T: Scalar>(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64(rng.normal() * std))
}

impl<T: Scalar> AttentionParams<T> {
    pub fn init(
        variant: AttentionVariant,
        d: usize,
        n: usize,
        rpe_rows: usize,
        rab_buckets: usize,
        rng: &mut Rng,
    ) -> Self {
        let w = |rng: &mut Rng| normal_tensor::<T>(&[d, d], INIT_STD, rng);
        AttentionParams {
            w_q: w(rng),
            b_q: Tensor::zeros(&[d]),
            w_k: variant.uses_w_k().then(|| w(rng)),
            b_k: variant.uses_w_k().then(|| Tensor::zeros(&[d])),
            w_v: w(rng),
            b_v: Tensor::zeros(&[d]),
            w_o: w(rng),
            b_o: Tensor::zeros(&[d]),
            part_embed: variant
                .uses_part_embed()
                .then(|| normal_tensor(&[n, d], INIT_STD, rng)),
            rpe_table: matches!(variant, AttentionVariant::Rpe)
                .then(|| normal_tensor(&[rpe_rows, d], INIT_STD, rng)),
            rab_weights: matches!(variant, AttentionVariant::Rab)
                .then(|| normal_tensor(&[rab_buckets, n], INIT_STD, rng)),
        }
    }

    pub fn bind(&self, g: &mut Graph<T>, sink: &mut Vec<NodeId>) -> AttentionNodes {
        let mut reg = |t: &Tensor<T>| {
            let id = g.param(t.clone());
            sink.push(id);
            id
        };
        AttentionNodes {
            w_q: reg(&self.w_q),
            b_q: reg(&self.b_q),
            w_k: self.w_k.as_ref().map(&mut reg),
            b_k: self.b_k.as_ref().map(&mut reg),
            w_v: reg(&self.w_v),
            b_v: reg(&self.b_v),
            w_o: reg(&self.w_o),
            b_o: reg(&self.b_o),
            part_embed: self.part_embed.as_ref().map(&mut reg),
            rpe_table: self.rpe_table.as_ref().map(&mut reg),
            rab_weights: self.rab_weights.as_ref().map(&mut reg),
        }
    }
}

/// Graph leaves for one attention layer's parameters.
#[derive(Debug, Clone, Copy)]
pub struct AttentionNodes {
    pub w_q: NodeId,
    pub b_q: NodeId,
    pub w_k: Option<NodeId>,
    pub b_k: Option<NodeId>,
    pub w_v: NodeId,
    pub b_v: NodeId,
    pub w_o: NodeId,
    pub b_o: NodeId,
    pub part_embed: Option<NodeId>,
    pub rpe_table: Option<NodeId>,
    pub rab_weights: Option<NodeId>,
}

/// Static context a variant may need beyond its parameters.
pub struct AttnContext<'a, T: Scalar> {
    pub heads: usize,
    pub mask: Option<&'a PartitionMask<T>>,
    pub rab_boundaries: Option<&'a [f64]>,
    pub rpe_clip: Option<usize>,
    /// Attention dropout (probability, seed); off by default.
    pub dropout: Option<(f64, u64)>,
}

impl<'a, T: Scalar> AttnContext<'a, T> {
    pub fn new(heads: usize) -> Self {
        AttnContext {
            heads,
            mask: None,
            rab_boundaries: None,
            rpe_clip: None,
            dropout: None,
        }
    }

    pub fn with_mask(mut self, mask: &'a PartitionMask<T>) -> Self {
        self.mask = Some(mask);
        self
    }
}

// ── shared pieces ───────────────────────────────────────────────────

fn project<T: Scalar>(g: &mut Graph<T>, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
    let xw = g.matmul(x, w)?;
    g.add(xw, b)
}

/// [l, d] -> [n, l, d/n], head h owning columns h*d/n..(h+1)*d/n.
fn split_heads<T: Scalar>(g: &mut Graph<T>, x: NodeId, n: usize) -> Result<NodeId> {
    let shape = g.value(x).shape().to_vec();
    let (l, d) = (shape[0], shape[1]);
    if d % n != 0 {
        return Err(Error::Config(format!(
            "hidden size {d} not divisible by {n} heads"
        )));
    }
    let r = g.reshape(x, &[l, n, d / n])?;
    g.permute(r, &[1, 0, 2])
}

/// [n, l, d/n] -> [l, d].
fn merge_heads<T: Scalar>(g: &mut Graph<T>, t: NodeId) -> Result<NodeId> {
    let shape = g.value(t).shape().to_vec();
    let (n, l, dh) = (shape[0], shape[1], shape[2]);
    let p = g.permute(t, &[1, 0, 2])?;
    g.reshape(p, &[l, n * dh])
}

fn apply_dropout<T: Scalar>(
    g: &mut Graph<T>,
    probs: NodeId,
    dropout: Option<(f64, u64)>,
) -> Result<NodeId> {
    let Some((p, seed)) = dropout else {
        return Ok(probs);
    };
    if p <= 0.0 {
        return Ok(probs);
    }
    if p >= 1.0 {
        return Err(Error::Config(format!("dropout probability {p} >= 1")));
    }
    let mut rng = Rng::with_stream(seed, 0x0d0d);
    let scale = T::from_f64(1.0 / (1.0 - p));
    let keep = Tensor::from_fn(g.value(probs).shape(), |_| {
        if rng.uniform() < p {
            T::ZERO
        } else {
            scale
        }
    });
    g.mul_const(probs, keep)
}

fn finish<T: Scalar>(
    g: &mut Graph<T>,
    pre_output: NodeId,
    p: &AttentionNodes,
    pad: &PadMask,
) -> Result<NodeId> {
    let out = project(g, pre_output, p.w_o, p.b_o)?;
    g.mul_const(out, pad.row_keep::<T>())
}

/// Multi-head softmax probabilities [n, l, l] from the projected q/k.
fn multihead_probs<T: Scalar>(
    g: &mut Graph<T>,
    variant: AttentionVariant,
    x: NodeId,
    p: &AttentionNodes,
    pad: &PadMask,
    n: usize,
    extra_bias: Option<NodeId>,
) -> Result<NodeId> {
    let d = g.value(x).shape()[1];
    let (w_k, b_k) = match (p.w_k, p.b_k) {
        (Some(w), Some(b)) => (w, b),
        _ => {
            return Err(Error::Config(format!(
                "{} requires a key projection",
                variant.config_name()
            )))
        }
    };
    let q = project(g, x, p.w_q, p.b_q)?;
    let k = project(g, x, w_k, b_k)?;
    let qh = split_heads(g, q, n)?;
    let kh = split_heads(g, k, n)?;
    let kt = g.transpose_last(kh)?;
    let raw = g.matmul(qh, kt)?;
    let mut scores = g.scale(raw, variant.score_multiplier::<T>(d, n));
    if let Some(bias) = extra_bias {
        scores = g.add(scores, bias)?;
    }
    let masked = g.add_const(scores, pad.key_bias::<T>())?;
    g.softmax(masked, 2)
}

// ── variants ────────────────────────────────────────────────────────

/// Baseline multi-head softmax attention; output rows of padded queries are
/// zero and padded keys receive exactly zero weight.
pub fn attend_multihead_softmax<T: Scalar>(
    g: &mut Graph<T>,
    x: NodeId,
    p: &AttentionNodes,
    pad: &PadMask,
    ctx: &AttnContext<T>,
) -> Result<NodeId> {
    let n = ctx.heads;
    let probs = multihead_probs(g, AttentionVariant::MultiHeadSoftmax, x, p, pad, n, None)?;
    let probs = apply_dropout(g, probs, ctx.dropout)?;
    let v = project(g, x, p.w_v, p.b_v)?;
    let vh = split_heads(g, v, n)?;
    let ctx_t = g.matmul(probs, vh)?;
    let merged = merge_heads(g, ctx_t)?;
    finish(g, merged, p, pad)
}

/// Multi-head softmax scores multiplied elementwise by the constant
/// partition mask before the value product.
pub fn attend_part_mask<T: Scalar>(
    g: &mut Graph<T>,
    x: NodeId,
    p: &AttentionNodes,
    pad: &PadMask,
    ctx: &AttnContext<T>,
) -> Result<NodeId> {
    let n = ctx.heads;
    let mask = ctx
        .mask
        .ok_or_else(|| Error::Config("part_mask requires a partition mask".into()))?;
    if mask.parts() != n || mask.len() != g.value(x).shape()[0] {
        return Err(Error::Shape(format!(
            "mask {:?} does not fit {} heads over length {}",
            mask.values.shape(),
            n,
            g.value(x).shape()[0]
        )));
    }
    let probs = multihead_probs(g, AttentionVariant::PartMask, x, p, pad, n, None)?;
    let masked = g.mul_const(probs, (*mask.values).clone())?;
    let masked = apply_dropout(g, masked, ctx.dropout)?;
    let v = project(g, x, p.w_v, p.b_v)?;
    let vh = split_heads(g, v, n)?;
    let ctx_t = g.matmul(masked, vh)?;
    let merged = merge_heads(g, ctx_t)?;
    finish(g, merged, p, pad)
}

fn require_one_head<T: Scalar>(
    variant: AttentionVariant,
    p: &AttentionNodes,
    ctx: &AttnContext<T>,
) -> Result<()> {
    if p.w_k.is_some() {
        return Err(Error::Config(format!(
            "{} must not carry a key projection",
            variant.config_name()
        )));
    }
    if ctx.mask.is_none() {
        return Err(Error::Config(format!(
            "{} requires a partition mask",
            variant.config_name()
        )));
    }
    Ok(())
}

/// One-head score sheet sigma(Q X^T / sqrt(d)) (+ optional bias), padded keys
/// zeroed, then L2-normalized per query row and broadcast against the mask.
/// Returns the [n, l, l] weight tensor.
fn sigmoid_weights<T: Scalar>(
    g: &mut Graph<T>,
    x: NodeId,
    q: NodeId,
    pad: &PadMask,
    mask: &PartitionMask<T>,
    bias: Option<NodeId>,
    dropout: Option<(f64, u64)>,
) -> Result<NodeId> {
    let d = g.value(x).shape()[1];
    let xt = g.transpose_last(x)?;
    let raw = g.matmul(q, xt)?;
    let mut scores = g.scale(raw, T::from_f64(1.0 / (d as f64).sqrt()));
    if let Some(b) = bias {
        scores = g.add(scores, b)?;
    }
    let sig = g.sigmoid(scores);
    // Padding is removed before normalization so the norm only covers valid keys.
    let kept = g.mul_const(sig, pad.key_keep::<T>())?;
    let sheet = g.l2_normalize(kept, 1, T::from_f64(ATTENTION_L2_EPS))?;
    let sheet = apply_dropout(g, sheet, dropout)?;
    g.mul_const(sheet, (*mask.values).clone())
}

pub fn attend_onehead_sigmoid<T: Scalar>(
    g: &mut Graph<T>,
    x: NodeId,
    p: &AttentionNodes,
    pad: &PadMask,
    ctx: &AttnContext<T>,
) -> Result<NodeId> {
    require_one_head(AttentionVariant::OneHeadSigmoid, p, ctx)?;
    let mask = ctx.mask.unwrap();
    let q = project(g, x, p.w_q, p.b_q)?;
    let weights = sigmoid_weights(g, x, q, pad, mask, None, ctx.dropout)?;
    let v = project(g, x, p.w_v, p.b_v)?;
    let vh = split_heads(g, v, ctx.heads)?;
    let ctx_t = g.matmul(weights, vh)?;
    let merged = merge_heads(g, ctx_t)?;
    finish(g, merged, p, pad)
}

/// Same structure as the sigmoid variant but with a softmax score sheet and
/// no L2 step.
pub fn attend_onehead_softmax<T: Scalar>(
    g: &mut Graph<T>,
    x: NodeId,
    p: &AttentionNodes,
    pad: &PadMask,
    ctx: &AttnContext<T>,
) -> Result<NodeId> {
    require_one_head(AttentionVariant::OneHeadSoftmax, p, ctx)?;
    let mask = ctx.mask.unwrap();
    let d = g.value(x).shape()[1];
    let q = project(g, x, p.w_q, p.b_q)?;
    let xt = g.transpose_last(x)?;
    let raw = g.matmul(q, xt)?;
    let scaled = g.scale(raw, T::from_f64(1.0 / (d as f64).sqrt()));
    let masked_scores = g.add_const(scaled, pad.key_bias::<T>())?;
    let sheet = g.softmax(masked_scores, 1)?;
    let sheet = apply_dropout(g, sheet, ctx.dropout)?;
    let weights = g.mul_const(sheet, (*mask.values).clone())?;
    let v = project(g, x, p.w_v, p.b_v)?;
    let vh = split_heads(g, v, ctx.heads)?;
    let ctx_t = g.matmul(weights, vh)?;
    let merged = merge_heads(g, ctx_t)?;
    finish(g, merged, p, pad)
}

/// Partition score bias: B[i, :] = sum_h (Q R^T)[i, h] * N[h, i, :].
/// The relative structure enters through the constant mask, so no memory
/// rearrangement of relative indices happens.
pub fn partition_bias<T: Scalar>(
    g: &mut Graph<T>,
    q: NodeId,
    part_embed: NodeId,
    mask: &PartitionMask<T>,
) -> Result<NodeId> {
    let n = mask.parts();
    let l = mask.len();
    if g.value(part_embed).shape()[0] != n {
        return Err(Error::Shape(format!(
            "partition embeddings {:?} vs {} mask parts",
            g.value(part_embed).shape(),
            n
        )));
    }
    let rt = g.transpose_last(part_embed)?;
    let qr = g.matmul(q, rt)?; // [l, n]
    let qr_hl = g.permute(qr, &[1, 0])?; // [n, l]
    let qr_col = g.reshape(qr_hl, &[n, l, 1])?;
    let weighted = g.mul_const(qr_col, (*mask.values).clone())?; // [n, l, l]
    g.sum_axis(weighted, 0)
}

/// One-head sigmoid attention with the partition bias (no partition-value
/// term; the Part_Bias rung of the ablation ladder).
pub fn attend_part_bias<T: Scalar>(
    g: &mut Graph<T>,
    x: NodeId,
    p: &AttentionNodes,
    pad: &PadMask,
    ctx: &AttnContext<T>,
) -> Result<NodeId> {
    require_one_head(AttentionVariant::PartBias, p, ctx)?;
    let mask = ctx.mask.unwrap();
    let r = p
        .part_embed
        .ok_or_else(|| Error::Config("part_bias requires partition embeddings".into()))?;
    let q = project(g, x, p.w_q, p.b_q)?;
    let bias = partition_bias(g, q, r, mask)?;
    let weights = sigmoid_weights(g, x, q, pad, mask, Some(bias), ctx.dropout)?;
    let v = project(g, x, p.w_v, p.b_v)?;
    let vh = split_heads(g, v, ctx.heads)?;
    let ctx_t = g.matmul(weights, vh)?;
    let merged = merge_heads(g, ctx_t)?;
    finish(g, merged, p, pad)
}

/// Full Shatter layer: sigmoid scores with partition bias, L2-normalized,
/// broadcast against the mask, plus the partition-value term
/// A_part V_part with A_part[i, h] = sum_j A[h, i, j], V_part = R W^V.
pub fn attend_shatter<T: Scalar>(
    g: &mut Graph<T>,
    x: NodeId,
    p: &AttentionNodes,
    pad: &PadMask,
    ctx: &AttnContext<T>,
) -> Result<NodeId> {
    require_one_head(AttentionVariant::Shatter, p, ctx)?;
    let mask = ctx.mask.unwrap();
    let r = p
        .part_embed
        .ok_or_else(|| Error::Config("shatter requires partition embeddings".into()))?;
    let q = project(g, x, p.w_q, p.b_q)?;
    let bias = partition_bias(g, q, r, mask)?;
    let weights = sigmoid_weights(g, x, q, pad, mask, Some(bias), ctx.dropout)?;
    let v = project(g, x, p.w_v, p.b_v)?;
    let vh = split_heads(g, v, ctx.heads)?;
    let ctx_t = g.matmul(weights, vh)?;
    let merged = merge_heads(g, ctx_t)?;

    let a_part_t = g.sum_axis(weights, 2)?; // [n, l]
    let a_part = g.permute(a_part_t, &[1, 0])?; // [l, n]
    let v_part = g.matmul(r, p.w_v)?; // [n, d]
    let part_term = g.matmul(a_part, v_part)?; // [l, d]
    let combined = g.add(merged, part_term)?;
    finish(g, combined, p, pad)
}

/// Relative position embeddings, computed in the relative-index formulation:
/// S_rel[i, j-i] = S[i, j]; A_rel = softmax((S_rel + Q K_rel^T)/sqrt(d));
/// output = A V + A_rel V_rel with K_rel = R W^K, V_rel = R W^V. Offsets
/// beyond the clip radius reuse the edge embedding rows.
pub fn attend_rpe<T: Scalar>(
    g: &mut Graph<T>,
    x: NodeId,
    p: &AttentionNodes,
    pad: &PadMask,
    ctx: &AttnContext<T>,
) -> Result<NodeId> {
    let l = g.value(x).shape()[0];
    let d = g.value(x).shape()[1];
    let table = p
        .rpe_table
        .ok_or_else(|| Error::Config("rpe requires a relative position table".into()))?;
    let (w_k, b_k) = match (p.w_k, p.b_k) {
        (Some(w), Some(b)) => (w, b),
        _ => return Err(Error::Config("rpe requires a key projection".into())),
    };
    let clip = ctx
        .rpe_clip
        .ok_or_else(|| Error::Config("rpe requires a clip radius".into()))?;
    let rows = g.value(table).shape()[0];
    if rows != 2 * clip - 1 {
        return Err(Error::Shape(format!(
            "rpe table has {rows} rows, clip {clip} wants {}",
            2 * clip - 1
        )));
    }

    let q = project(g, x, p.w_q, p.b_q)?;
    let k = project(g, x, w_k, b_k)?;
    let v = project(g, x, p.w_v, p.b_v)?;

    let kt = g.transpose_last(k)?;
    let s = g.matmul(q, kt)?; // [l, l]
    let s_rel = g.abs_to_rel(s)?; // [l, 2l-1]

    // Table rows for each offset -(l-1)..=(l-1), clipped to the radius.
    let offsets: Vec<usize> = (-(l as i64 - 1)..=(l as i64 - 1))
        .map(|off| {
            let c = clip as i64 - 1;
            (off.clamp(-c, c) + c) as usize
        })
        .collect();
    let r_rows = g.gather(table, &offsets)?; // [2l-1, d]
    let k_rel = g.matmul(r_rows, w_k)?;
    let k_rel_t = g.transpose_last(k_rel)?;
    let q_krel = g.matmul(q, k_rel_t)?; // [l, 2l-1]

    let summed = g.add(s_rel, q_krel)?;
    let scaled = g.scale(summed, T::from_f64(1.0 / (d as f64).sqrt()));
    // Relative slots that map outside the sequence, or onto padding, are
    // removed before the softmax so no probability leaks to them.
    let invalid = Tensor::from_fn(&[l, 2 * l - 1], |flat| {
        let i = flat / (2 * l - 1);
        let r = flat % (2 * l - 1);
        let j = i as i64 + r as i64 - (l as i64 - 1);
        if j < 0 || j >= l as i64 || !pad.is_valid(j as usize) {
            T::neg_infinity()
        } else {
            T::ZERO
        }
    });
    let masked = g.add_const(scaled, invalid)?;
    let a_rel = g.softmax(masked, 1)?;
    let a_rel = apply_dropout(g, a_rel, ctx.dropout)?;
    let a = g.rel_to_abs(a_rel)?;

    let v_rel = g.matmul(r_rows, p.w_v)?;
    let ctx_abs = g.matmul(a, v)?;
    let ctx_rel = g.matmul(a_rel, v_rel)?;
    let combined = g.add(ctx_abs, ctx_rel)?;
    finish(g, combined, p, pad)
}

/// Bucketed relative attention bias added to the multi-head scores:
/// B[h, i, j] = W_B[bucket(j - i), h].
pub fn attend_rab<T: Scalar>(
    g: &mut Graph<T>,
    x: NodeId,
    p: &AttentionNodes,
    pad: &PadMask,
    ctx: &AttnContext<T>,
) -> Result<NodeId> {
    let n = ctx.heads;
    let l = g.value(x).shape()[0];
    let weights = p
        .rab_weights
        .ok_or_else(|| Error::Config("rab requires bucket weights".into()))?;
    let boundaries = ctx
        .rab_boundaries
        .ok_or_else(|| Error::Config("rab requires bucket boundaries".into()))?;
    validate_boundaries(boundaries)?;
    let m = g.value(weights).shape()[0];
    if boundaries.len() != m + 1 {
        return Err(Error::Config(format!(
            "{} boundaries do not delimit {m} buckets",
            boundaries.len()
        )));
    }
    if g.value(weights).shape()[1] != n {
        return Err(Error::Shape(format!(
            "rab weights {:?} vs {n} heads",
            g.value(weights).shape()
        )));
    }

    // Constant bucket indicator: ind[g, i*l + j] = 1 iff bucket(j-i) = g.
    // The bias tensor is then W_B^T x ind, a plain matmul against a constant.
    let mut ind = Tensor::<T>::zeros(&[m, l * l]);
    for i in 0..l {
        for j in 0..l {
            let gidx = bucket_index(boundaries, j as f64 - i as f64);
            ind.data_mut()[gidx * l * l + i * l + j] = T::ONE;
        }
    }
    let ind_node = g.input(ind);
    let wt = g.transpose_last(weights)?; // [n, m]
    let bias_flat = g.matmul(wt, ind_node)?; // [n, l*l]
    let bias = g.reshape(bias_flat, &[n, l, l])?;

    let probs = multihead_probs(g, AttentionVariant::Rab, x, p, pad, n, Some(bias))?;
    let probs = apply_dropout(g, probs, ctx.dropout)?;
    let v = project(g, x, p.w_v, p.b_v)?;
    let vh = split_heads(g, v, n)?;
    let ctx_t = g.matmul(probs, vh)?;
    let merged = merge_heads(g, ctx_t)?;
    finish(g, merged, p, pad)
}

/// Dispatch on the variant.
pub fn attend<T: Scalar>(
    g: &mut Graph<T>,
    variant: AttentionVariant,
    x: NodeId,
    p: &AttentionNodes,
    pad: &PadMask,
    ctx: &AttnContext<T>,
) -> Result<NodeId> {
    match variant {
        AttentionVariant::MultiHeadSoftmax => attend_multihead_softmax(g, x, p, pad, ctx),
        AttentionVariant::PartMask => attend_part_mask(g, x, p, pad, ctx),
        AttentionVariant::OneHeadSoftmax => attend_onehead_softmax(g, x, p, pad, ctx),
        AttentionVariant::OneHeadSigmoid => attend_onehead_sigmoid(g, x, p, pad, ctx),
        AttentionVariant::PartBias => attend_part_bias(g, x, p, pad, ctx),
        AttentionVariant::Shatter => attend_shatter(g, x, p, pad, ctx),
        AttentionVariant::Rpe => attend_rpe(g, x, p, pad, ctx),
        AttentionVariant::Rab => attend_rab(g, x, p, pad, ctx),
    }
}

/// Sequence-classification pooling: recompute a weighted average of the
/// layer's hidden states from the running pooled vector y (1 x d). The
/// pooled query has no sequence position, so no partition mask, partition
/// bias, or relative term applies; softmax-scored encoders pool with
/// multi-head softmax (single-head for RPE via n = 1), the no-key variants
/// score against X directly, and sigmoid-scored encoders use the
/// L2-normalized sigmoid. Returns a V-weighted average (no output
/// projection, matching the pooling formulation).
pub fn classify_attend<T: Scalar>(
    g: &mut Graph<T>,
    variant: AttentionVariant,
    y: NodeId,
    x: NodeId,
    p: &AttentionNodes,
    pad: &PadMask,
    ctx: &AttnContext<T>,
) -> Result<NodeId> {
    let n = ctx.heads;
    let d = g.value(x).shape()[1];
    if g.value(y).shape() != [1, d] {
        return Err(Error::Shape(format!(
            "pooled vector must be [1, {d}], got {:?}",
            g.value(y).shape()
        )));
    }
    let q = project(g, y, p.w_q, p.b_q)?;
    let v = project(g, x, p.w_v, p.b_v)?;
    let vh = split_heads(g, v, n)?;

    let probs = if variant.uses_w_k() {
        // Multi-head softmax pooling (n = 1 degenerates to single-head).
        let (w_k, b_k) = (p.w_k.unwrap(), p.b_k.unwrap());
        let k = project(g, x, w_k, b_k)?;
        let kh = split_heads(g, k, n)?;
        let kt = g.transpose_last(kh)?;
        let qh = split_heads(g, q, n)?;
        let raw = g.matmul(qh, kt)?; // [n, 1, l]
        let scaled = g.scale(raw, T::from_f64(1.0 / (d as f64 / n as f64).sqrt()));
        let masked = g.add_const(scaled, pad.key_bias::<T>())?;
        g.softmax(masked, 2)?
    } else {
        let xt = g.transpose_last(x)?;
        let raw = g.matmul(q, xt)?; // [1, l]
        let scaled = g.scale(raw, T::from_f64(1.0 / (d as f64).sqrt()));
        if variant.sigmoid_scored() {
            let sig = g.sigmoid(scaled);
            let kept = g.mul_const(sig, pad.key_keep::<T>())?;
            g.l2_normalize(kept, 1, T::from_f64(ATTENTION_L2_EPS))?
        } else {
            let masked = g.add_const(scaled, pad.key_bias::<T>())?;
            g.softmax(masked, 1)?
        }
    };
    // A [n, 1, l] (or broadcast [1, l]) against V blocks [n, l, d/n].
    let pooled = g.matmul(probs, vh)?;
    merge_heads(g, pooled)
}
