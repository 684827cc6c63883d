use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{derive_seed, is_maskable, Sample};
use crate::encoder::{forward, Batch, EncoderConfig, Mode, ModelParameters};
use crate::error::{Error, Result};
use crate::label::Label;
use crate::objectives::{mlm_logits_at, softmax};
use crate::tokenizer::{MASK_ID, NUM_SPECIALS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentSpec {
    /// Sequential mask-and-fill rounds per new sample.
    pub repetitions: usize,
    /// New samples generated from each source sample.
    pub copies: usize,
    /// Sample fills from the tempered distribution instead of taking the argmax.
    pub temperature: Option<f64>,
    /// Classes whose samples are augmented.
    pub classes: Vec<Label>,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec {
            repetitions: 5,
            copies: 1,
            temperature: None,
            classes: vec![Label::Hate, Label::Offensive],
        }
    }
}

impl AugmentSpec {
    pub fn validate(&self) -> Result<()> {
        match self.temperature {
            Some(t) if !(t > 0.0 && t.is_finite()) => {
                Err(Error::InvalidConfig(format!("temperature must be positive, got {t}")))
            }
            _ => Ok(()),
        }
    }
}

/// Rewrite `repetitions` positions of `ids`, one at a time: mask a random
/// non-special position, run the masked-LM head and put the fill in its
/// place. A position is re-picked only once every eligible one has been used.
/// Fills are always ordinary tokens, so special positions never move.
pub fn augment(
    ids: &[u32],
    params: &ModelParameters,
    config: &EncoderConfig,
    repetitions: usize,
    temperature: Option<f64>,
    seed: u64,
) -> Result<Vec<u32>> {
    let eligible: Vec<usize> = (0..ids.len()).filter(|&t| is_maskable(ids[t])).collect();
    if eligible.is_empty() {
        return Err(Error::NoEligiblePosition);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = ids.to_vec();
    let mut used = BTreeSet::new();
    for _ in 0..repetitions {
        if used.len() == eligible.len() {
            used.clear();
        }
        let fresh: Vec<usize> = eligible.iter().copied().filter(|t| !used.contains(t)).collect();
        let t = fresh[rng.random_range(0..fresh.len())];
        used.insert(t);
        out[t] = MASK_ID;
        let pass = forward(params, config, &Batch::from_sequences(&[&out]), Mode::Eval)?;
        let logits = mlm_logits_at(&pass, params, 0, t);
        let ordinary = &logits.as_slice().unwrap()[NUM_SPECIALS..];
        let choice = match temperature {
            None => argmax(ordinary),
            Some(temp) => {
                let scaled: Vec<f64> = ordinary.iter().map(|z| z / temp).collect();
                sample(&softmax(&scaled), rng.random())
            }
        };
        out[t] = (NUM_SPECIALS + choice) as u32;
    }
    Ok(out)
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn sample(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// New samples for the configured classes; each inherits its source label.
/// Sources without an ordinary token are skipped.
pub fn augment_corpus(
    samples: &[Sample],
    params: &ModelParameters,
    config: &EncoderConfig,
    spec: &AugmentSpec,
    seed: u64,
) -> Result<Vec<Sample>> {
    spec.validate()?;
    let mut out = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        if !spec.classes.contains(&s.label) || !s.ids.iter().any(|&id| is_maskable(id)) {
            continue;
        }
        for copy in 0..spec.copies {
            let stream = (i * spec.copies + copy) as u64;
            let ids = augment(&s.ids, params, config, spec.repetitions, spec.temperature, derive_seed(seed, stream))?;
            out.push(Sample { ids, label: s.label });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::init_parameters;
    use crate::objectives::FusionSpec;
    use crate::tokenizer::{BOS_ID, EOS_ID};

    fn config() -> EncoderConfig {
        EncoderConfig {
            num_layers: 1,
            hidden_size: 8,
            num_heads: 2,
            ffn_size: 16,
            max_positions: 10,
            vocab_size: 30,
            dropout_rate: 0.1,
            num_classes: 3,
            tie_mlm_head: true,
            fusion: FusionSpec::last_blocks(1, 1),
        }
    }

    const DOC: [u32; 7] = [BOS_ID, 10, 11, 5, 12, 13, EOS_ID];

    #[test]
    fn zero_repetitions_is_identity() {
        let c = config();
        let p = init_parameters(&c, 1);
        assert_eq!(augment(&DOC, &p, &c, 0, None, 3).unwrap(), DOC);
    }

    #[test]
    fn bounded_edits_and_fixed_specials() {
        let c = config();
        let p = init_parameters(&c, 2);
        for reps in 0..8 {
            let out = augment(&DOC, &p, &c, reps, None, reps as u64).unwrap();
            assert_eq!(out.len(), DOC.len());
            assert!(out.iter().zip(&DOC).filter(|(a, b)| a != b).count() <= reps);
            for (a, b) in out.iter().zip(&DOC) {
                assert_eq!(is_maskable(*a), is_maskable(*b));
                if !is_maskable(*b) {
                    assert_eq!(a, b);
                }
            }
        }
    }

    #[test]
    fn degenerate_head_fills_its_favourite() {
        let c = config();
        let mut p = init_parameters(&c, 3);
        p.mlm_bias[21] = 100.0;
        let out = augment(&DOC, &p, &c, 4, None, 9).unwrap();
        // four distinct rounds over the four ordinary positions
        assert_eq!(out, vec![BOS_ID, 21, 21, 5, 21, 21, EOS_ID]);
        let sampled = augment(&DOC, &p, &c, 2, Some(1.0), 9).unwrap();
        assert_eq!(sampled.iter().filter(|&&id| id == 21).count(), 2);
    }

    #[test]
    fn deterministic_per_seed() {
        let c = config();
        let p = init_parameters(&c, 4);
        let a = augment(&DOC, &p, &c, 3, Some(2.0), 1).unwrap();
        assert_eq!(a, augment(&DOC, &p, &c, 3, Some(2.0), 1).unwrap());
    }

    #[test]
    fn no_eligible_position() {
        let c = config();
        let p = init_parameters(&c, 4);
        let err = augment(&[BOS_ID, 5, EOS_ID], &p, &c, 1, None, 1).unwrap_err();
        assert!(matches!(err, Error::NoEligiblePosition));
    }

    #[test]
    fn corpus_augments_selected_classes_only() {
        let c = config();
        let p = init_parameters(&c, 5);
        let samples = vec![
            Sample { ids: DOC.to_vec(), label: Label::Clean },
            Sample { ids: DOC.to_vec(), label: Label::Hate },
            Sample { ids: vec![BOS_ID, EOS_ID], label: Label::Offensive },
            Sample { ids: DOC.to_vec(), label: Label::Offensive },
        ];
        let spec = AugmentSpec { copies: 2, ..AugmentSpec::default() };
        let out = augment_corpus(&samples, &p, &c, &spec, 7).unwrap();
        assert_eq!(out.len(), 4);
        assert_eq!(out.iter().filter(|s| s.label == Label::Hate).count(), 2);
        assert!(out.iter().all(|s| s.label != Label::Clean));
    }
}
