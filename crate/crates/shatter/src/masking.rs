//! MLM masking: select a fraction of non-special positions, replace with
//! [MASK] / a random token / the original, and record the labels.

use crate::corpus::PackedSequence;
use crate::encoder::{MASK_ID, SPECIAL_TOKENS};
use crate::error::{Error, Result};
use crate::rng::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct MaskingConfig {
    /// Fraction of non-special positions selected for prediction.
    pub fraction: f64,
    /// Of the selected: probability of replacing with [MASK] ...
    pub mask_prob: f64,
    /// ... with a random non-special token ...
    pub random_prob: f64,
    /// ... or keeping the original token.
    pub keep_prob: f64,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        MaskingConfig {
            fraction: 0.15,
            mask_prob: 0.8,
            random_prob: 0.1,
            keep_prob: 0.1,
        }
    }
}

impl MaskingConfig {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if !in_unit(self.fraction)
            || !in_unit(self.mask_prob)
            || !in_unit(self.random_prob)
            || !in_unit(self.keep_prob)
        {
            return Err(Error::Config("masking probabilities must be in [0, 1]".into()));
        }
        let s = self.mask_prob + self.random_prob + self.keep_prob;
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "mask/random/keep split sums to {s}, expected 1"
            )));
        }
        Ok(())
    }
}

/// One training example: possibly corrupted inputs plus (position, original
/// id) targets. Unselected positions carry no label.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedSequence {
    pub tokens: Vec<usize>,
    pub pad: crate::attention::PadMask,
    pub targets: Vec<(usize, usize)>,
}

/// Non-special valid positions of a packed sequence.
fn maskable_positions(seq: &PackedSequence) -> Vec<usize> {
    (0..seq.tokens.len())
        .filter(|&i| seq.pad.is_valid(i) && seq.tokens[i] >= SPECIAL_TOKENS)
        .collect()
}

pub fn apply_masking(
    seq: &PackedSequence,
    cfg: &MaskingConfig,
    vocab: usize,
    rng: &mut Rng,
) -> Result<Option<MaskedSequence>> {
    cfg.validate()?;
    let slots = maskable_positions(seq);
    if slots.len() < 2 {
        // Too short to learn anything from; skipped by contract.
        return Ok(None);
    }
    let mut tokens = seq.tokens.clone();
    let mut targets = Vec::new();
    for &pos in &slots {
        if rng.uniform() >= cfg.fraction {
            continue;
        }
        let original = seq.tokens[pos];
        let roll = rng.uniform();
        if roll < cfg.mask_prob {
            tokens[pos] = MASK_ID;
        } else if roll < cfg.mask_prob + cfg.random_prob {
            tokens[pos] = SPECIAL_TOKENS + rng.below(vocab - SPECIAL_TOKENS);
        }
        targets.push((pos, original));
    }
    Ok(Some(MaskedSequence {
        tokens,
        pad: seq.pad.clone(),
        targets,
    }))
}

/// Deterministic batch: `batch` sequences drawn with replacement, masked.
/// Sequences with fewer than two maskable tokens are skipped (redrawn).
pub fn sample_mlm_batch(
    sequences: &[PackedSequence],
    cfg: &MaskingConfig,
    batch: usize,
    vocab: usize,
    seed: u64,
) -> Result<Vec<MaskedSequence>> {
    if sequences.is_empty() {
        return Err(Error::Data("cannot sample from an empty corpus".into()));
    }
    let mut rng = Rng::with_stream(seed, 0x5a5a);
    let mut out = Vec::with_capacity(batch);
    let mut attempts = 0usize;
    while out.len() < batch {
        attempts += 1;
        if attempts > batch * 20 + 100 {
            return Err(Error::Data(
                "corpus has no sequences with >= 2 maskable tokens".into(),
            ));
        }
        let pick = rng.below(sequences.len());
        if let Some(masked) = apply_masking(&sequences[pick], cfg, vocab, &mut rng)? {
            out.push(masked);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::PadMask;
    use crate::encoder::{CLS_ID, SEP_ID};

    fn packed(content: &[usize]) -> PackedSequence {
        let mut tokens = vec![CLS_ID];
        tokens.extend_from_slice(content);
        tokens.push(SEP_ID);
        let l = tokens.len();
        PackedSequence {
            tokens,
            pad: PadMask::all_valid(l),
        }
    }

    #[test]
    fn zero_fraction_changes_nothing() {
        let seq = packed(&[5, 6, 7, 8]);
        let cfg = MaskingConfig {
            fraction: 0.0,
            ..Default::default()
        };
        let mut rng = Rng::new(1);
        let masked = apply_masking(&seq, &cfg, 16, &mut rng).unwrap().unwrap();
        assert_eq!(masked.tokens, seq.tokens);
        assert!(masked.targets.is_empty());
    }

    #[test]
    fn full_fraction_all_mask_split_masks_every_content_token() {
        let seq = packed(&[5, 6, 7, 8, 9]);
        let cfg = MaskingConfig {
            fraction: 1.0,
            mask_prob: 1.0,
            random_prob: 0.0,
            keep_prob: 0.0,
        };
        let mut rng = Rng::new(2);
        let masked = apply_masking(&seq, &cfg, 16, &mut rng).unwrap().unwrap();
        for i in 1..=5 {
            assert_eq!(masked.tokens[i], MASK_ID);
        }
        assert_eq!(masked.tokens[0], CLS_ID);
        assert_eq!(masked.targets.len(), 5);
        assert_eq!(masked.targets[0], (1, 5));
    }

    #[test]
    fn selected_fraction_obeys_law_of_large_numbers() {
        // ~10k maskable positions: expect 0.15 +/- 0.01.
        let content: Vec<usize> = (0..10_000).map(|i| 4 + (i % 12)).collect();
        let seq = packed(&content);
        let cfg = MaskingConfig::default();
        let mut rng = Rng::new(3);
        let masked = apply_masking(&seq, &cfg, 16, &mut rng).unwrap().unwrap();
        let frac = masked.targets.len() as f64 / 10_000.0;
        assert!((frac - 0.15).abs() < 0.01, "fraction {frac}");
    }

    #[test]
    fn too_short_sequences_are_skipped() {
        let seq = packed(&[5]);
        let mut rng = Rng::new(4);
        assert!(apply_masking(&seq, &MaskingConfig::default(), 16, &mut rng)
            .unwrap()
            .is_none());
    }

    #[test]
    fn batches_are_deterministic_per_seed() {
        let seqs: Vec<PackedSequence> = (0..8)
            .map(|i| packed(&[4 + i, 5 + i, 6 + i, 7 + i]))
            .collect();
        let cfg = MaskingConfig::default();
        let a = sample_mlm_batch(&seqs, &cfg, 4, 16, 77).unwrap();
        let b = sample_mlm_batch(&seqs, &cfg, 4, 16, 77).unwrap();
        assert_eq!(a, b);
        let c = sample_mlm_batch(&seqs, &cfg, 4, 16, 78).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn bad_split_rejected() {
        let cfg = MaskingConfig {
            fraction: 0.15,
            mask_prob: 0.8,
            random_prob: 0.3,
            keep_prob: 0.1,
        };
        assert!(cfg.validate().is_err());
    }
}
