//! Synthetic order-sensitivity tasks. Each generator is constructed so that
//! token counts alone carry no signal; only models that can use sequence
//! order (absolute or relative) can beat chance.

use crate::corpus::PackedSequence;
use crate::encoder::{CLS_ID, SPECIAL_TOKENS};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticTask {
    /// Label = which designated class token sits at the probe position.
    /// Every class token appears exactly once per sequence, so bag-of-words
    /// features are label-independent.
    PositionProbe,
    /// Label = whether token a precedes token b.
    OrderPair,
    /// Periodic sequences: every token repeats its predecessor `period`
    /// positions back, so masked tokens are recoverable only from relative
    /// offsets. Used as an MLM corpus (labels are unused).
    CopyMlm,
}

impl SyntheticTask {
    pub fn name(self) -> &'static str {
        match self {
            SyntheticTask::PositionProbe => "position_probe",
            SyntheticTask::OrderPair => "order_pair",
            SyntheticTask::CopyMlm => "copy_mlm",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "position_probe" => Ok(SyntheticTask::PositionProbe),
            "order_pair" => Ok(SyntheticTask::OrderPair),
            "copy_mlm" => Ok(SyntheticTask::CopyMlm),
            other => Err(Error::Config(format!("unknown synthetic task '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SyntheticConfig {
    pub examples: usize,
    pub len: usize,
    pub vocab: usize,
    /// Class count for position_probe.
    pub classes: usize,
    /// Probe position for position_probe (position 0 is [CLS]).
    pub probe_position: usize,
    /// Copy period for copy_mlm.
    pub period: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            examples: 2048,
            len: 32,
            vocab: 64,
            classes: 8,
            probe_position: 1,
            period: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub task: SyntheticTask,
    pub sequences: Vec<PackedSequence>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub vocab: usize,
}

pub fn generate(task: SyntheticTask, cfg: &SyntheticConfig) -> Result<LabeledDataset> {
    match task {
        SyntheticTask::PositionProbe => position_probe(cfg),
        SyntheticTask::OrderPair => order_pair(cfg),
        SyntheticTask::CopyMlm => copy_mlm(cfg),
    }
}

fn position_probe(cfg: &SyntheticConfig) -> Result<LabeledDataset> {
    let class_base = SPECIAL_TOKENS;
    let distractor_base = class_base + cfg.classes;
    if cfg.vocab <= distractor_base + 1 {
        return Err(Error::Config(format!(
            "vocab {} too small for {} classes plus distractors",
            cfg.vocab, cfg.classes
        )));
    }
    if cfg.probe_position == 0 || cfg.probe_position >= cfg.len {
        return Err(Error::Config(format!(
            "probe position {} outside 1..{}",
            cfg.probe_position, cfg.len
        )));
    }
    if cfg.len < cfg.classes + 2 {
        return Err(Error::Config("sequence too short to hold all class tokens".into()));
    }
    let mut rng = Rng::with_stream(cfg.seed, 0x9057);
    let mut sequences = Vec::with_capacity(cfg.examples);
    let mut labels = Vec::with_capacity(cfg.examples);
    for _ in 0..cfg.examples {
        let label = rng.below(cfg.classes);
        // Remaining class tokens plus iid distractors, shuffled over the
        // non-probe slots.
        let mut rest: Vec<usize> = (0..cfg.classes)
            .filter(|&c| c != label)
            .map(|c| class_base + c)
            .collect();
        while rest.len() < cfg.len - 2 {
            rest.push(distractor_base + rng.below(cfg.vocab - distractor_base));
        }
        rng.shuffle(&mut rest);
        let mut tokens = Vec::with_capacity(cfg.len);
        tokens.push(CLS_ID);
        let mut rest_iter = rest.into_iter();
        for pos in 1..cfg.len {
            if pos == cfg.probe_position {
                tokens.push(class_base + label);
            } else {
                tokens.push(rest_iter.next().expect("filled above"));
            }
        }
        sequences.push(PackedSequence::all_valid(tokens));
        labels.push(label);
    }
    Ok(LabeledDataset {
        task: SyntheticTask::PositionProbe,
        sequences,
        labels,
        classes: cfg.classes,
        vocab: cfg.vocab,
    })
}

fn order_pair(cfg: &SyntheticConfig) -> Result<LabeledDataset> {
    let (tok_a, tok_b) = (SPECIAL_TOKENS, SPECIAL_TOKENS + 1);
    let distractor_base = SPECIAL_TOKENS + 2;
    if cfg.vocab <= distractor_base + 1 {
        return Err(Error::Config("vocab too small for order_pair".into()));
    }
    if cfg.len < 4 {
        return Err(Error::Config("order_pair needs len >= 4".into()));
    }
    let mut rng = Rng::with_stream(cfg.seed, 0x04d3);
    let mut sequences = Vec::with_capacity(cfg.examples);
    let mut labels = Vec::with_capacity(cfg.examples);
    for _ in 0..cfg.examples {
        let pos_a = 1 + rng.below(cfg.len - 1);
        let pos_b = loop {
            let p = 1 + rng.below(cfg.len - 1);
            if p != pos_a {
                break p;
            }
        };
        let mut tokens = vec![0usize; cfg.len];
        tokens[0] = CLS_ID;
        for (pos, t) in tokens.iter_mut().enumerate().skip(1) {
            *t = if pos == pos_a {
                tok_a
            } else if pos == pos_b {
                tok_b
            } else {
                distractor_base + rng.below(cfg.vocab - distractor_base)
            };
        }
        sequences.push(PackedSequence::all_valid(tokens));
        labels.push(usize::from(pos_a < pos_b));
    }
    Ok(LabeledDataset {
        task: SyntheticTask::OrderPair,
        sequences,
        labels,
        classes: 2,
        vocab: cfg.vocab,
    })
}

fn copy_mlm(cfg: &SyntheticConfig) -> Result<LabeledDataset> {
    if cfg.period < 2 || cfg.period >= cfg.len {
        return Err(Error::Config(format!(
            "copy period {} outside 2..{}",
            cfg.period, cfg.len
        )));
    }
    let pool = cfg.vocab - SPECIAL_TOKENS;
    let mut rng = Rng::with_stream(cfg.seed, 0xc09e);
    let mut sequences = Vec::with_capacity(cfg.examples);
    for _ in 0..cfg.examples {
        let mut tokens = Vec::with_capacity(cfg.len);
        tokens.push(CLS_ID);
        for t in 1..cfg.len {
            if t <= cfg.period {
                tokens.push(SPECIAL_TOKENS + rng.below(pool));
            } else {
                tokens.push(tokens[t - cfg.period]);
            }
        }
        sequences.push(PackedSequence::all_valid(tokens));
    }
    Ok(LabeledDataset {
        task: SyntheticTask::CopyMlm,
        sequences,
        labels: Vec::new(),
        classes: 2,
        vocab: cfg.vocab,
    })
}

/// Multinomial logistic regression on token-count features; the reference
/// baseline that order-aware models must beat. Returns dev accuracy.
pub fn bow_baseline_accuracy(train: &LabeledDataset, dev: &LabeledDataset) -> Result<f64> {
    if train.labels.is_empty() || dev.labels.is_empty() {
        return Err(Error::Data("bag-of-words baseline needs labeled data".into()));
    }
    let vocab = train.vocab;
    let classes = train.classes;
    let counts = |ds: &LabeledDataset| -> Vec<Vec<f64>> {
        ds.sequences
            .iter()
            .map(|s| {
                let mut c = vec![0.0; vocab];
                for (i, &t) in s.tokens.iter().enumerate() {
                    if s.pad.is_valid(i) {
                        c[t] += 1.0;
                    }
                }
                c
            })
            .collect()
    };
    let xs = counts(train);
    let dev_xs = counts(dev);
    let n = xs.len() as f64;
    let mut w = vec![0.0f64; vocab * classes];
    let mut b = vec![0.0f64; classes];
    let lr = 0.5;
    for _ in 0..300 {
        let mut gw = vec![0.0f64; vocab * classes];
        let mut gb = vec![0.0f64; classes];
        for (x, &y) in xs.iter().zip(&train.labels) {
            let mut logits: Vec<f64> = (0..classes)
                .map(|c| {
                    b[c] + x
                        .iter()
                        .enumerate()
                        .map(|(t, &v)| v * w[t * classes + c])
                        .sum::<f64>()
                })
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            for (c, l) in logits.iter_mut().enumerate() {
                let p = (*l - max).exp() / z;
                let delta = p - if c == y { 1.0 } else { 0.0 };
                gb[c] += delta / n;
                for (t, &v) in x.iter().enumerate() {
                    if v != 0.0 {
                        gw[t * classes + c] += delta * v / n;
                    }
                }
            }
        }
        for (wi, gi) in w.iter_mut().zip(&gw) {
            *wi -= lr * gi;
        }
        for (bi, gi) in b.iter_mut().zip(&gb) {
            *bi -= lr * gi;
        }
    }
    let mut correct = 0usize;
    for (x, &y) in dev_xs.iter().zip(&dev.labels) {
        let best = (0..classes)
            .map(|c| {
                (
                    c,
                    b[c] + x
                        .iter()
                        .enumerate()
                        .map(|(t, &v)| v * w[t * classes + c])
                        .sum::<f64>(),
                )
            })
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .unwrap()
            .0;
        if best == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / dev.labels.len() as f64)
}
