use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::is_maskable;
use crate::encoder::{Batch, Targets};
use crate::error::{Error, Result};
use crate::tokenizer::{MASK_ID, NUM_SPECIALS};

/// Selection rate and what happens to a selected position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskingSpec {
    pub mask_ratio: f64,
    pub replace_mask: f64,
    pub replace_random: f64,
    pub keep_original: f64,
}

impl Default for MaskingSpec {
    fn default() -> Self {
        MaskingSpec {
            mask_ratio: 0.15,
            replace_mask: 0.8,
            replace_random: 0.1,
            keep_original: 0.1,
        }
    }
}

impl MaskingSpec {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            problems.push(format!("mask_ratio must be in (0, 1), got {}", self.mask_ratio));
        }
        for (name, p) in [
            ("replace_mask", self.replace_mask),
            ("replace_random", self.replace_random),
            ("keep_original", self.keep_original),
        ] {
            if !(0.0..=1.0).contains(&p) {
                problems.push(format!("{name} must be in [0, 1], got {p}"));
            }
        }
        let sum = self.replace_mask + self.replace_random + self.keep_original;
        if (sum - 1.0).abs() > 1e-9 {
            problems.push(format!("replacement probabilities sum to {sum}, not 1"));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems.join("; ")))
        }
    }
}

/// Select positions for masked-LM training.
///
/// Every unpadded non-special position is selected with probability
/// `mask_ratio`; a sequence with eligible positions always gets at least one.
/// Selected positions become `<mask>`, a random non-special id, or stay
/// unchanged; targets hold the original ids.
pub fn mask_batch(batch: &Batch, spec: &MaskingSpec, vocab_size: usize, seed: u64) -> Result<Batch> {
    spec.validate()?;
    if matches!(batch.targets, Targets::Mlm { .. }) {
        return Err(Error::InvalidArgument("batch already carries MLM targets".into()));
    }
    if vocab_size <= NUM_SPECIALS {
        return Err(Error::InvalidArgument(format!("vocabulary of {vocab_size} has no ordinary tokens")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut token_ids = batch.token_ids.clone();
    let mut targets = Array2::zeros(token_ids.raw_dim());
    let mut loss_mask = Array2::from_elem(token_ids.raw_dim(), false);
    for b in 0..batch.batch_size() {
        let eligible: Vec<usize> = (0..batch.seq_len())
            .filter(|&t| batch.attention_mask[[b, t]] && is_maskable(batch.token_ids[[b, t]]))
            .collect();
        let mut selected: Vec<usize> = eligible
            .iter()
            .copied()
            .filter(|_| rng.random::<f64>() < spec.mask_ratio)
            .collect();
        if selected.is_empty() && !eligible.is_empty() {
            selected.push(eligible[rng.random_range(0..eligible.len())]);
        }
        for t in selected {
            let original = batch.token_ids[[b, t]];
            targets[[b, t]] = original;
            loss_mask[[b, t]] = true;
            let r: f64 = rng.random();
            if r < spec.replace_mask {
                token_ids[[b, t]] = MASK_ID;
            } else if r < spec.replace_mask + spec.replace_random {
                token_ids[[b, t]] = rng.random_range(NUM_SPECIALS as u32..vocab_size as u32);
            }
        }
    }
    Ok(Batch {
        token_ids,
        attention_mask: batch.attention_mask.clone(),
        targets: Targets::Mlm { targets, loss_mask },
    })
}
