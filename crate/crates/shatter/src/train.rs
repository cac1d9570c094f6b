//! The desk-scale training loops: MLM pretraining with validation tracking
//! and checkpointing, plus classifier finetuning on the synthetic tasks.

use crate::checkpoint::{save_model, save_train_state};
use crate::corpus::PackedSequence;
use crate::encoder::{BoundEncoder, Model};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::masking::{sample_mlm_batch, MaskedSequence, MaskingConfig};
use crate::optim::{adam_step, lr_at, AdamState, OptimizerConfig, ScheduleConfig};
use crate::rng::{derive_seed, Rng};
use crate::synthetic::LabeledDataset;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

const TAG_SAMPLE: u64 = 0x5a;
const TAG_VALID: u64 = 0x7a;
const TAG_DROPOUT: u64 = 0xd7;
const TAG_FINETUNE: u64 = 0xf7;

fn default_batch() -> usize {
    8
}
fn default_peak_lr() -> f64 {
    1e-4
}
fn default_valid_every() -> u64 {
    50
}
fn default_checkpoint_every() -> u64 {
    500
}
fn default_valid_batches() -> usize {
    4
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_batch")]
    pub batch: usize,
    pub steps: u64,
    #[serde(default = "default_peak_lr")]
    pub peak_lr: f64,
    /// Warmup steps; full-scale runs use 10k, toy presets far less.
    #[serde(default)]
    pub warmup: u64,
    #[serde(default = "default_valid_every")]
    pub valid_every: u64,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: u64,
    #[serde(default = "default_valid_batches")]
    pub valid_batches: usize,
    #[serde(default)]
    pub deterministic: bool,
    #[serde(default)]
    pub masking: MaskingConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
}

impl TrainConfig {
    pub fn schedule(&self) -> ScheduleConfig {
        ScheduleConfig {
            peak_lr: self.peak_lr,
            warmup: self.warmup.min(self.steps),
            total: self.steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if self.valid_every == 0 {
            return Err(Error::Config("valid_every must be positive".into()));
        }
        self.masking.validate()?;
        if self.steps > 0 {
            self.schedule().validate()?;
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            batch: default_batch(),
            steps: 0,
            peak_lr: default_peak_lr(),
            warmup: 0,
            valid_every: default_valid_every(),
            checkpoint_every: default_checkpoint_every(),
            valid_batches: default_valid_batches(),
            deterministic: false,
            masking: MaskingConfig::default(),
            optimizer: OptimizerConfig::default(),
        }
    }
}

/// Append-only loss/step records; rendered as CSV with a fixed header.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub lr: f64,
    pub ms_per_step: f64,
}

pub const METRICS_HEADER: &str = "step,train_loss,valid_loss,lr,ms_per_step";

impl MetricsLog {
    pub fn push(&mut self, row: MetricsRow) {
        if let Some(last) = self.rows.last() {
            assert!(row.step > last.step, "metrics steps must be monotone");
        }
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format_row(r));
        }
        out
    }
}

fn format_row(r: &MetricsRow) -> String {
    format!(
        "{},{},{},{},{:.3}\n",
        r.step, r.train_loss, r.valid_loss, r.lr, r.ms_per_step
    )
}

#[derive(Debug, Clone)]
pub struct TrainData {
    pub train: Vec<PackedSequence>,
    pub valid: Vec<PackedSequence>,
    pub vocab: usize,
}

/// Weighted-mean MLM loss over a masked batch: each sequence's mean CE is
/// weighted by its share of masked positions. None when nothing was masked.
fn mlm_batch_loss<TGraph: crate::tensor::Scalar>(
    model: &Model<TGraph>,
    g: &mut Graph<TGraph>,
    bound: &BoundEncoder,
    batch: &[MaskedSequence],
    dropout_seed: Option<u64>,
) -> Result<Option<NodeId>> {
    let total: usize = batch.iter().map(|s| s.targets.len()).sum();
    if total == 0 {
        return Ok(None);
    }
    let mut acc: Option<NodeId> = None;
    for seq in batch {
        if seq.targets.is_empty() {
            continue;
        }
        let states = model.encode(g, bound, &seq.tokens, &seq.pad, dropout_seed)?;
        let positions: Vec<usize> = seq.targets.iter().map(|&(p, _)| p).collect();
        let labels: Vec<usize> = seq.targets.iter().map(|&(_, t)| t).collect();
        let logits = model.mlm_logits(g, bound, *states.last().unwrap(), &positions)?;
        let ce = g.cross_entropy(logits, &labels)?;
        let weighted = g.scale(
            ce,
            TGraph::from_f64(seq.targets.len() as f64 / total as f64),
        );
        acc = Some(match acc {
            Some(a) => g.add(a, weighted)?,
            None => weighted,
        });
    }
    Ok(acc)
}

/// Deterministic MLM loss over fixed masked batches of `sequences`.
pub fn mlm_eval_loss(
    model: &Model<f32>,
    sequences: &[PackedSequence],
    masking: &MaskingConfig,
    vocab: usize,
    batches: usize,
    batch_size: usize,
    seed: u64,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for b in 0..batches {
        let batch = sample_mlm_batch(
            sequences,
            masking,
            batch_size,
            vocab,
            derive_seed(seed, TAG_VALID, b as u64),
        )?;
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        if let Some(loss) = mlm_batch_loss(model, &mut g, &bound, &batch, None)? {
            total += g.value(loss).scalar_value() as f64;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Data("no masked positions in evaluation set".into()));
    }
    Ok(total / count as f64)
}

/// MLM pretraining from the current optimizer step up to `cfg.steps`.
/// With an output directory, writes metrics.csv incrementally, a trainstate
/// checkpoint at the configured interval, and model.ckpt at the end.
pub fn train(
    model: &mut Model<f32>,
    adam: &mut AdamState<f32>,
    data: &TrainData,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<MetricsLog> {
    train_until(model, adam, data, cfg, out_dir, cfg.steps)
}

/// Like `train` but stops after `until` steps while keeping the full
/// schedule, which is what an interrupted run looks like.
pub fn train_until(
    model: &mut Model<f32>,
    adam: &mut AdamState<f32>,
    data: &TrainData,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    until: u64,
) -> Result<MetricsLog> {
    cfg.validate()?;
    let until = until.min(cfg.steps);
    let schedule = cfg.schedule();
    let mut log = MetricsLog::default();
    let mut csv: Option<std::fs::File> = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            if adam.step == 0 {
                save_train_state(&dir.join("state.ckpt"), model, adam, cfg.seed)?;
                let mut f = std::fs::File::create(dir.join("metrics.csv"))?;
                writeln!(f, "{METRICS_HEADER}")?;
                Some(f)
            } else {
                Some(
                    std::fs::OpenOptions::new()
                        .append(true)
                        .open(dir.join("metrics.csv"))?,
                )
            }
        }
        None => None,
    };

    while adam.step < until {
        let t = adam.step;
        let started = Instant::now();
        let lr = lr_at(t + 1, &schedule);
        let batch = sample_mlm_batch(
            &data.train,
            &cfg.masking,
            cfg.batch,
            data.vocab,
            derive_seed(cfg.seed, TAG_SAMPLE, t),
        )?;
        let dropout_seed = (model.config.attention_dropout > 0.0)
            .then(|| derive_seed(cfg.seed, TAG_DROPOUT, t));
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let (train_loss, grads) = match mlm_batch_loss(model, &mut g, &bound, &batch, dropout_seed)?
        {
            Some(loss) => {
                let value = g.value(loss).scalar_value() as f64;
                if !value.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite training loss at step {t}"
                    )));
                }
                let grads_all = g.backward(loss)?;
                let grads: Vec<Tensor<f32>> = bound
                    .flat
                    .iter()
                    .map(|&id| grads_all.for_param(id, g.value(id).shape()))
                    .collect();
                (value, grads)
            }
            None => {
                // Nothing was masked this step (possible at tiny fractions):
                // a zero-gradient step keeps the counter moving.
                let grads = bound
                    .flat
                    .iter()
                    .map(|&id| Tensor::zeros(g.value(id).shape()))
                    .collect();
                (0.0, grads)
            }
        };
        adam_step(&mut model.params, adam, &grads, &cfg.optimizer, lr)?;
        let step_now = adam.step;
        let ms = if cfg.deterministic {
            0.0
        } else {
            started.elapsed().as_secs_f64() * 1e3
        };

        if step_now % cfg.valid_every == 0 || step_now == cfg.steps {
            let valid_loss = mlm_eval_loss(
                model,
                &data.valid,
                &cfg.masking,
                data.vocab,
                cfg.valid_batches,
                cfg.batch,
                derive_seed(cfg.seed, TAG_VALID, 0),
            )?;
            let row = MetricsRow {
                step: step_now,
                train_loss,
                valid_loss,
                lr,
                ms_per_step: ms,
            };
            if let Some(f) = csv.as_mut() {
                f.write_all(format_row(&row).as_bytes())?;
                f.flush()?;
            }
            log.push(row);
        }
        if let Some(dir) = out_dir {
            if (cfg.checkpoint_every > 0 && step_now % cfg.checkpoint_every == 0)
                || step_now == cfg.steps
            {
                save_train_state(&dir.join("state.ckpt"), model, adam, cfg.seed)?;
            }
        }
    }
    if let Some(dir) = out_dir {
        if adam.step == cfg.steps {
            save_model(&dir.join("model.ckpt"), model, cfg.seed, adam.step)?;
        }
    }
    Ok(log)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub steps: u64,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_finetune_lr")]
    pub lr: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub deterministic: bool,
}

fn default_finetune_lr() -> f64 {
    1e-3
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            steps: 300,
            batch: default_batch(),
            lr: default_finetune_lr(),
            seed: 0,
            deterministic: false,
        }
    }
}

/// End-to-end classifier training on a labeled synthetic dataset (encoder
/// plus head), cross-entropy on the configured classification strategy.
pub fn train_classifier(
    model: &mut Model<f32>,
    adam: &mut AdamState<f32>,
    data: &LabeledDataset,
    cfg: &FinetuneConfig,
) -> Result<()> {
    if data.labels.len() != data.sequences.len() || data.labels.is_empty() {
        return Err(Error::Data("classifier training needs labeled sequences".into()));
    }
    if model.config.classes < data.classes {
        return Err(Error::Config(format!(
            "model has {} classes, task wants {}",
            model.config.classes, data.classes
        )));
    }
    let schedule = ScheduleConfig {
        peak_lr: cfg.lr,
        warmup: (cfg.steps / 10).max(1).min(cfg.steps),
        total: cfg.steps,
    };
    let opt = OptimizerConfig::default();
    let target = adam.step + cfg.steps;
    while adam.step < target {
        let t = adam.step;
        let mut rng = Rng::with_stream(derive_seed(cfg.seed, TAG_FINETUNE, t), 0x00f1);
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let mut acc: Option<NodeId> = None;
        let w = 1.0 / cfg.batch as f32;
        for _ in 0..cfg.batch {
            let pick = rng.below(data.sequences.len());
            let seq = &data.sequences[pick];
            let states = model.encode(&mut g, &bound, &seq.tokens, &seq.pad, None)?;
            let scores = model.classify(&mut g, &bound, &states, &seq.pad)?;
            let ce = g.cross_entropy(scores, &[data.labels[pick]])?;
            let weighted = g.scale(ce, w);
            acc = Some(match acc {
                Some(a) => g.add(a, weighted)?,
                None => weighted,
            });
        }
        let loss = acc.expect("batch > 0");
        if !g.value(loss).scalar_value().is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite finetuning loss at step {t}"
            )));
        }
        let grads_all = g.backward(loss)?;
        let grads: Vec<Tensor<f32>> = bound
            .flat
            .iter()
            .map(|&id| grads_all.for_param(id, g.value(id).shape()))
            .collect();
        let lr = lr_at(t + 1, &schedule);
        adam_step(&mut model.params, adam, &grads, &opt, lr)?;
    }
    Ok(())
}

/// Argmax accuracy of the configured classification strategy.
pub fn classifier_accuracy(model: &Model<f32>, data: &LabeledDataset) -> Result<f64> {
    if data.labels.is_empty() {
        return Err(Error::Data("accuracy needs labeled data".into()));
    }
    let mut correct = 0usize;
    for (seq, &label) in data.sequences.iter().zip(&data.labels) {
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let states = model.encode(&mut g, &bound, &seq.tokens, &seq.pad, None)?;
        let scores = model.classify(&mut g, &bound, &states, &seq.pad)?;
        let row = g.value(scores);
        let best = (0..row.shape()[1])
            .max_by(|&a, &b| row.at(&[0, a]).partial_cmp(&row.at(&[0, b])).unwrap())
            .unwrap();
        if best == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.labels.len() as f64)
}
