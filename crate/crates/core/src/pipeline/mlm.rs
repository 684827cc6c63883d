use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{derive_seed, is_maskable, mask_batch, MaskingSpec, TrainEvent};
use crate::encoder::{Batch, Depth, EncoderConfig, Mode, ModelParameters};
use crate::error::{Error, Result};
use crate::objectives::mlm_loss_and_grad;
use crate::optim::{adamw_step, default_warmup, schedule_lr, OptimizerState, TrainPlan};

/// Settings of a masked-LM training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlmTuning {
    pub lr: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// `None` means one eighth of the steps in one pass over the corpus.
    pub warmup_steps: Option<usize>,
    pub masking: MaskingSpec,
    pub seed: u64,
}

impl Default for MlmTuning {
    fn default() -> Self {
        MlmTuning {
            lr: 3e-5,
            weight_decay: 0.01,
            steps: 10_000,
            batch_size: 32,
            warmup_steps: None,
            masking: MaskingSpec::default(),
            seed: 0,
        }
    }
}

impl MlmTuning {
    pub fn plan(&self, corpus_len: usize) -> TrainPlan {
        let per_epoch = corpus_len.div_ceil(self.batch_size.max(1));
        let warmup = self.warmup_steps.unwrap_or_else(|| default_warmup(per_epoch)).min(self.steps);
        TrainPlan {
            weight_decay: self.weight_decay,
            ..TrainPlan::uniform(self.lr, warmup, self.steps)
        }
    }
}

#[derive(Debug, Clone)]
pub struct MlmOutcome {
    pub params: ModelParameters,
    /// Loss of every step, in order.
    pub losses: Vec<f64>,
}

/// Continue masked-LM training of `params` on `corpus` for `tuning.steps`
/// AdamW steps. The classification head is left as it was.
pub fn tune_mlm(
    params: &ModelParameters,
    config: &EncoderConfig,
    corpus: &[Vec<u32>],
    tuning: &MlmTuning,
    log: &mut dyn FnMut(&TrainEvent),
) -> Result<MlmOutcome> {
    tuning.masking.validate()?;
    if tuning.batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be positive".into()));
    }
    let usable: Vec<&Vec<u32>> = corpus.iter().filter(|s| s.iter().any(|&id| is_maskable(id))).collect();
    if usable.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let plan = tuning.plan(usable.len());
    plan.validate()?;
    let mut params = params.clone();
    if tuning.steps == 0 {
        return Ok(MlmOutcome { params, losses: Vec::new() });
    }
    let head = params.classifier.clone();
    let mut state = OptimizerState::new(&params);
    let updatable = Depth::all(config.num_layers).into_iter().collect();
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut pass = 0u64;
    let mut losses = Vec::with_capacity(tuning.steps);
    for step in 1..=tuning.steps {
        let mut chosen = Vec::with_capacity(tuning.batch_size);
        while chosen.len() < tuning.batch_size.min(usable.len()) {
            if cursor == order.len() {
                order = (0..usable.len()).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(tuning.seed);
                rng.set_stream(pass);
                order.shuffle(&mut rng);
                cursor = 0;
                pass += 1;
            }
            chosen.push(usable[order[cursor]].as_slice());
            cursor += 1;
        }
        let batch = Batch::from_sequences(&chosen);
        let masked = mask_batch(&batch, &tuning.masking, config.vocab_size, derive_seed(tuning.seed, 1 << 40 | step as u64))?;
        let mode = Mode::Train {
            seed: derive_seed(tuning.seed, 2 << 40 | step as u64),
        };
        let out = mlm_loss_and_grad(&params, config, &masked, mode)?;
        if !out.loss.is_finite() {
            return Err(Error::InvalidArgument(format!("MLM loss diverged at step {step}")));
        }
        adamw_step(&mut params, &out.grads, &mut state, &plan, step, &updatable)?;
        params.classifier = head.clone();
        params.round_to_f32();
        state.round_to_f32();
        losses.push(out.loss);
        log(&TrainEvent::Step {
            step,
            loss: out.loss,
            lr: tuning.lr * schedule_lr(step, &plan)?,
        });
    }
    Ok(MlmOutcome { params, losses })
}
