//! Analytic parameter, FLOP and activation-memory accounting, plus
//! wall-clock microbenchmarks.
//!
//! Counting convention (printed in every report): weight matrices and
//! learnt relative tables inside the layer stack only — attention
//! projections, partition embeddings, RPE tables, RAB weights, FFN
//! matrices. Word and position embeddings, biases, layer norms and the
//! heads outside the stack are excluded. FLOPs count a multiply-add as 2
//! and an elementwise op as 1.

use crate::attention::AttentionVariant;
use crate::encoder::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::masking::MaskingConfig;
use crate::optim::{adam_step, AdamState, OptimizerConfig};
use crate::rng::Rng;
use crate::tensor::Tensor;
use serde::Serialize;
use std::time::Instant;

pub const COUNT_CONVENTION: &str =
    "layer-stack weight matrices and relative tables only; excludes all embeddings, biases, layer norms and heads";
pub const FLOP_CONVENTION: &str = "multiply-add = 2 flops; elementwise op = 1 flop";

#[derive(Debug, Clone, Serialize)]
pub struct ParamReport {
    pub convention: String,
    pub variant: String,
    pub layers: usize,
    pub per_layer_terms: Vec<(String, u64)>,
    pub per_layer: u64,
    pub total: u64,
    /// Rounded to one decimal in millions, e.g. "84.9M".
    pub millions: String,
    pub flags: Vec<String>,
}

pub fn format_millions(count: u64) -> String {
    format!("{:.1}M", count as f64 / 1e6)
}

/// Per-layer weight terms under the documented convention.
fn per_layer_terms(config: &ModelConfig) -> Vec<(String, u64)> {
    let d = config.hidden as u64;
    let dff = config.ffn_size() as u64;
    let n = config.heads as u64;
    let mut terms: Vec<(String, u64)> = Vec::new();
    let projections = if config.variant.uses_w_k() { 4 } else { 3 };
    terms.push((
        format!("attention projections ({projections} x d^2)"),
        projections * d * d,
    ));
    match config.variant {
        AttentionVariant::PartBias | AttentionVariant::Shatter => {
            terms.push(("partition embeddings (n x d)".into(), n * d));
        }
        AttentionVariant::Rpe => {
            let rows = config.rpe_rows() as u64;
            terms.push(("rpe table ((2c-1) x d)".into(), rows * d));
        }
        AttentionVariant::Rab => {
            let m = config.rab_buckets.unwrap_or(32) as u64;
            terms.push(("rab weights (m x n)".into(), m * n));
        }
        _ => {}
    }
    terms.push(("ffn matrices (2 x d x d_ff)".into(), 2 * d * dff));
    terms
}

/// Trainable weight parameters under the documented convention. Exact.
pub fn count_params(config: &ModelConfig) -> Result<ParamReport> {
    config.validate()?;
    let terms = per_layer_terms(config);
    let per_layer: u64 = terms.iter().map(|(_, v)| v).sum();
    let total = per_layer * config.layers as u64;
    let mut flags = Vec::new();
    if config.layers >= 24 && config.hidden >= 1024 {
        flags.push(
            "large configs are reported under the same convention as base sizes; no halving applied"
                .into(),
        );
    }
    Ok(ParamReport {
        convention: COUNT_CONVENTION.into(),
        variant: config.variant.config_name().into(),
        layers: config.layers,
        per_layer_terms: terms,
        per_layer,
        total,
        millions: format_millions(total),
        flags,
    })
}

/// The same count by walking actually allocated parameters, filtered by the
/// convention. An independent code path used to cross-check `count_params`.
pub fn count_params_reflective(config: &ModelConfig) -> Result<u64> {
    let model = Model::<f32>::new(config.clone(), 0)?;
    let mut total = 0u64;
    model.params.visit(&mut |name, t, kind| {
        if kind.counted() && name.starts_with("layer") {
            total += t.numel() as u64;
        }
    });
    Ok(total)
}

/// Baseline-plus-one-matrix formula for the sinusoid-relative family:
/// the multi-head baseline plus an extra d x d matrix per layer.
pub fn xlnet_formula_params(config: &ModelConfig) -> Result<u64> {
    let mut base = config.clone();
    base.variant = AttentionVariant::MultiHeadSoftmax;
    base.heads = if config.hidden % 12 == 0 { 12 } else { 1 };
    base.positions = true;
    base.rpe_clip = None;
    let bert = count_params(&base)?.total;
    Ok(bert + (config.layers * config.hidden * config.hidden) as u64)
}

#[derive(Debug, Clone, Serialize)]
pub struct FlopReport {
    pub convention: String,
    pub variant: String,
    pub sequence_length: usize,
    pub items: Vec<(String, u64)>,
    /// Attention FLOPs for one layer over the whole sequence.
    pub per_layer: u64,
    /// per_layer / l.
    pub per_token: u64,
    /// The omitted key-projection term (2 l d^2) for no-key variants; 0
    /// otherwise.
    pub key_projection_saving: u64,
}

/// Attention FLOPs for one layer at sequence length l, itemized.
pub fn count_attention_flops(config: &ModelConfig, l: usize) -> Result<FlopReport> {
    config.validate()?;
    let d = config.hidden as u64;
    let n = config.heads as u64;
    let lu = l as u64;
    let mut items: Vec<(String, u64)> = Vec::new();
    let mut push = |name: &str, v: u64| items.push((name.into(), v));

    push("q_projection", 2 * lu * d * d);
    let key_saving = if config.variant.uses_w_k() {
        push("k_projection", 2 * lu * d * d);
        0
    } else {
        push("k_projection (omitted)", 0);
        2 * lu * d * d
    };
    push("v_projection", 2 * lu * d * d);
    push("scores (q x keys)", 2 * lu * lu * d);

    match config.variant {
        AttentionVariant::MultiHeadSoftmax => {
            push("softmax", 4 * n * lu * lu);
        }
        AttentionVariant::PartMask => {
            push("softmax", 4 * n * lu * lu);
            push("mask multiply", n * lu * lu);
        }
        AttentionVariant::OneHeadSoftmax => {
            push("softmax", 4 * lu * lu);
            push("mask broadcast", n * lu * lu);
        }
        AttentionVariant::OneHeadSigmoid => {
            push("sigmoid", lu * lu);
            push("l2 normalize", 3 * lu * lu + lu);
            push("mask broadcast", n * lu * lu);
        }
        AttentionVariant::PartBias | AttentionVariant::Shatter => {
            push("partition bias (q x r)", 2 * lu * n * d);
            push("partition bias mix", 2 * n * lu * lu);
            push("sigmoid", lu * lu);
            push("l2 normalize", 3 * lu * lu + lu);
            push("mask broadcast", n * lu * lu);
            if matches!(config.variant, AttentionVariant::Shatter) {
                push("partition value (r x w_v)", 2 * n * d * d);
                push("partition attention sum", n * lu * lu);
                push("partition value product", 2 * lu * n * d);
            }
        }
        AttentionVariant::Rpe => {
            let rel = 2 * lu - 1;
            push("relative scatter/gather", 2 * lu * lu);
            push("k_rel projection", 2 * rel * d * d);
            push("v_rel projection", 2 * rel * d * d);
            push("q x k_rel", 2 * lu * rel * d);
            push("softmax (relative axis)", 4 * lu * rel);
            push("relative value product", 2 * lu * rel * d);
        }
        AttentionVariant::Rab => {
            push("bias lookup", n * lu * lu);
            push("bias add", n * lu * lu);
            push("softmax", 4 * n * lu * lu);
        }
    }
    push("attention values (a x v)", 2 * lu * lu * d);
    push("output projection", 2 * lu * d * d);

    let per_layer: u64 = items.iter().map(|(_, v)| v).sum();
    Ok(FlopReport {
        convention: FLOP_CONVENTION.into(),
        variant: config.variant.config_name().into(),
        sequence_length: l,
        items,
        per_layer,
        per_token: per_layer / lu.max(1),
        key_projection_saving: key_saving,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct MemoryReport {
    pub variant: String,
    pub batch: usize,
    pub sequence_length: usize,
    /// 32-bit activation values retained for backward, itemized per layer
    /// per sequence.
    pub per_layer_terms: Vec<(String, u64)>,
    pub per_layer_values: u64,
    pub embedding_values: u64,
    pub total_values: u64,
    pub bytes: u64,
}

/// Activation memory retained for backward at (batch, l): 32-bit values,
/// summed term by term, dominated by the n x l x l attention tensors.
pub fn estimate_activation_memory(config: &ModelConfig, batch: usize, l: usize) -> Result<MemoryReport> {
    config.validate()?;
    let d = config.hidden as u64;
    let dff = config.ffn_size() as u64;
    let n = config.heads as u64;
    let lu = l as u64;
    let mut terms: Vec<(String, u64)> = Vec::new();
    let mut push = |name: &str, v: u64| terms.push((name.into(), v));

    push("layer input", lu * d);
    push("q projection", lu * d);
    if config.variant.uses_w_k() {
        push("k projection", lu * d);
    }
    push("v projection", lu * d);
    match config.variant {
        AttentionVariant::MultiHeadSoftmax | AttentionVariant::PartMask | AttentionVariant::Rab => {
            push("attention logits (n l^2)", n * lu * lu);
            push("attention probabilities (n l^2)", n * lu * lu);
            if matches!(config.variant, AttentionVariant::PartMask) {
                push("masked probabilities (n l^2)", n * lu * lu);
            }
            if matches!(config.variant, AttentionVariant::Rab) {
                push("bias tensor (n l^2)", n * lu * lu);
            }
        }
        AttentionVariant::OneHeadSoftmax => {
            push("score sheet (l^2)", 2 * lu * lu);
            push("broadcast weights (n l^2)", n * lu * lu);
        }
        AttentionVariant::OneHeadSigmoid | AttentionVariant::PartBias | AttentionVariant::Shatter => {
            push("score sheet + normalized sheet (2 l^2)", 2 * lu * lu);
            push("broadcast weights (n l^2)", n * lu * lu);
            if config.variant.uses_part_embed() {
                push("partition bias (l^2 + l n)", lu * lu + lu * n);
            }
            if matches!(config.variant, AttentionVariant::Shatter) {
                push("partition value terms (l n + n d)", lu * n + n * d);
            }
        }
        AttentionVariant::Rpe => {
            let rel = 2 * lu - 1;
            push("relative logits + probabilities", 2 * lu * rel);
            push("relative key/value rows", 2 * rel * d);
        }
    }
    push("context merge", lu * d);
    push("attention output", lu * d);
    push("post-attention layer norm", lu * d);
    push("ffn hidden", lu * dff);
    push("ffn output", lu * d);
    push("post-ffn layer norm", lu * d);

    let per_layer: u64 = terms.iter().map(|(_, v)| v).sum();
    let embedding = lu * d;
    let total_values = (per_layer * config.layers as u64 + embedding) * batch as u64;
    Ok(MemoryReport {
        variant: config.variant.config_name().into(),
        batch,
        sequence_length: l,
        per_layer_terms: terms,
        per_layer_values: per_layer,
        embedding_values: embedding,
        total_values,
        bytes: total_values * 4,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct TimingReport {
    pub variant: String,
    pub batch: usize,
    pub sequence_length: usize,
    pub measured_steps: usize,
    pub median_ms: Option<f64>,
    pub min_ms: Option<f64>,
    pub max_ms: Option<f64>,
    pub note: Option<String>,
}

/// Median wall time of forward+backward+update over `steps` measured
/// iterations after `warmup` discarded ones. Hardware-dependent; reported,
/// never asserted.
pub fn time_steps(
    config: &ModelConfig,
    batch: usize,
    l: usize,
    steps: usize,
    warmup: usize,
) -> Result<TimingReport> {
    config.validate()?;
    if l > config.max_len {
        return Err(Error::Config(format!(
            "timing length {l} exceeds max_len {}",
            config.max_len
        )));
    }
    let mut model = Model::<f32>::new(config.clone(), 7)?;
    let mut adam = AdamState::init(&model.params);
    let mut rng = Rng::new(1234);
    let sequences: Vec<Vec<usize>> = (0..batch.max(1))
        .map(|_| {
            (0..l)
                .map(|_| 4 + rng.below(config.vocab - 4))
                .collect()
        })
        .collect();
    let masking = MaskingConfig::default();
    let opt = OptimizerConfig::default();
    let mut samples = Vec::with_capacity(steps);
    for it in 0..steps + warmup {
        let started = Instant::now();
        let mut g = crate::graph::Graph::new();
        let bound = model.bind(&mut g);
        let mut acc: Option<crate::graph::NodeId> = None;
        for seq in &sequences {
            let packed = crate::corpus::PackedSequence::all_valid(seq.clone());
            let masked = crate::masking::apply_masking(
                &packed,
                &masking,
                config.vocab,
                &mut rng,
            )?
            .expect("length >= 2");
            if masked.targets.is_empty() {
                continue;
            }
            let states = model.encode(&mut g, &bound, &masked.tokens, &masked.pad, None)?;
            let positions: Vec<usize> = masked.targets.iter().map(|&(p, _)| p).collect();
            let labels: Vec<usize> = masked.targets.iter().map(|&(_, t)| t).collect();
            let logits = model.mlm_logits(&mut g, &bound, *states.last().unwrap(), &positions)?;
            let ce = g.cross_entropy(logits, &labels)?;
            acc = Some(match acc {
                Some(a) => g.add(a, ce)?,
                None => ce,
            });
        }
        if let Some(loss) = acc {
            let scaled = g.scale(loss, 1.0 / batch as f32);
            let grads_all = g.backward(scaled)?;
            let grads: Vec<Tensor<f32>> = bound
                .flat
                .iter()
                .map(|&id| grads_all.for_param(id, g.value(id).shape()))
                .collect();
            adam_step(&mut model.params, &mut adam, &grads, &opt, 1e-4)?;
        }
        if it >= warmup {
            samples.push(started.elapsed().as_secs_f64() * 1e3);
        }
    }
    if samples.is_empty() {
        return Ok(TimingReport {
            variant: config.variant.config_name().into(),
            batch,
            sequence_length: l,
            measured_steps: 0,
            median_ms: None,
            min_ms: None,
            max_ms: None,
            note: Some("no measured steps after warmup".into()),
        });
    }
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = samples[samples.len() / 2];
    Ok(TimingReport {
        variant: config.variant.config_name().into(),
        batch,
        sequence_length: l,
        measured_steps: samples.len(),
        median_ms: Some(median),
        min_ms: samples.first().copied(),
        max_ms: samples.last().copied(),
        note: None,
    })
}
