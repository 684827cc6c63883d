use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{augment_corpus, derive_seed, evaluate, stratified_kfold, AugmentSpec, EvalReport, FoldMetrics, FoldSplit, Sample};
use crate::encoder::{Batch, Checkpoint, EncoderConfig, Mode, ModelParameters};
use crate::error::{Error, Result};
use crate::label::Label;
use crate::objectives::{classifier_loss_and_grad, predict, SmoothingSpec};
use crate::optim::{adamw_step, apply_freeze, default_warmup, schedule_lr, OptimizerState, TrainPlan};

/// Progress reported while training.
#[derive(Debug, Clone, PartialEq)]
pub enum TrainEvent {
    Step { step: usize, loss: f64, lr: f64 },
    Epoch(EpochRecord),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_macro_f1: f64,
}

/// Fine-tuning settings. `warmup_steps` and `total_steps` inside `plan` are
/// derived from the training-set size; see [`fine_tune_plan`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FineTuneSpec {
    pub plan: TrainPlan,
    pub smoothing_alpha: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// `None` means one eighth of an epoch's steps.
    pub warmup_steps: Option<usize>,
    pub seed: u64,
}

impl Default for FineTuneSpec {
    fn default() -> Self {
        FineTuneSpec {
            plan: TrainPlan::default(),
            smoothing_alpha: 0.2,
            epochs: 10,
            batch_size: 32,
            warmup_steps: None,
            seed: 0,
        }
    }
}

impl FineTuneSpec {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.batch_size == 0 {
            problems.push("batch_size must be positive".to_string());
        }
        if !(0.0..1.0).contains(&self.smoothing_alpha) {
            problems.push(format!("smoothing_alpha must be in [0, 1), got {}", self.smoothing_alpha));
        }
        if let Err(e) = self.plan.validate() {
            problems.push(e.to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems.join("; ")))
        }
    }
}

/// `spec.plan` with the schedule sized for `train_len` samples.
pub fn fine_tune_plan(spec: &FineTuneSpec, train_len: usize) -> TrainPlan {
    let per_epoch = train_len.div_ceil(spec.batch_size.max(1));
    let total = per_epoch * spec.epochs;
    TrainPlan {
        warmup_steps: spec.warmup_steps.unwrap_or_else(|| default_warmup(per_epoch)).min(total),
        total_steps: total,
        ..spec.plan.clone()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BestEpoch {
    pub epoch: usize,
    pub macro_f1: f64,
    pub params: ModelParameters,
}

/// Everything needed to continue a fine-tuning run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ModelParameters,
    pub optimizer: OptimizerState,
    pub epochs_done: usize,
    pub best: Option<BestEpoch>,
    pub history: Vec<EpochRecord>,
}

const MOMENT1: &str = "adam.m.";
const MOMENT2: &str = "adam.v.";
const BEST: &str = "best.";

impl TrainState {
    pub fn new(params: ModelParameters) -> Self {
        let mut params = params;
        params.round_to_f32();
        TrainState {
            optimizer: OptimizerState::new(&params),
            params,
            epochs_done: 0,
            best: None,
            history: Vec::new(),
        }
    }

    /// Parameters to use for prediction: the best epoch if any, else the latest.
    pub fn selected(&self) -> &ModelParameters {
        self.best.as_ref().map_or(&self.params, |b| &b.params)
    }

    /// Current parameters, best-epoch parameters and Adam moments, with
    /// progress in the metadata under `"training"`.
    pub fn to_checkpoint(&self, config: &EncoderConfig) -> Checkpoint {
        let mut ckpt = Checkpoint::new(config.clone());
        ckpt.push_params("", &self.params);
        if let Some(best) = &self.best {
            ckpt.push_params(BEST, &best.params);
        }
        ckpt.push_params(MOMENT1, &self.optimizer.first_moment);
        ckpt.push_params(MOMENT2, &self.optimizer.second_moment);
        ckpt.meta = json!({
            "training": {
                "epochs_done": self.epochs_done,
                "step": self.optimizer.t,
                "tensor_steps": self.optimizer.tensor_steps,
                "best_epoch": self.best.as_ref().map(|b| b.epoch),
                "best_macro_f1": self.best.as_ref().map(|b| b.macro_f1),
                "history": self.history,
            }
        });
        ckpt
    }

    /// Inverse of [`TrainState::to_checkpoint`]. A checkpoint without
    /// training progress starts a fresh state from its parameters.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let params = ckpt.params("")?;
        let Some(progress) = ckpt.meta.get("training") else {
            return Ok(TrainState::new(params));
        };
        let bad = |what: &str| Error::Checkpoint(format!("training metadata lacks a valid {what}"));
        let field = |name: &str| progress.get(name).ok_or_else(|| bad(name));
        let mut optimizer = OptimizerState::new(&params);
        optimizer.first_moment = ckpt.params(MOMENT1)?;
        optimizer.second_moment = ckpt.params(MOMENT2)?;
        optimizer.t = field("step")?.as_u64().ok_or_else(|| bad("step"))? as usize;
        optimizer.tensor_steps = serde_json::from_value(field("tensor_steps")?.clone())?;
        if optimizer.tensor_steps.len() != params.tensors().len() {
            return Err(bad("tensor_steps"));
        }
        let best = match field("best_epoch")?.as_u64() {
            Some(epoch) => Some(BestEpoch {
                epoch: epoch as usize,
                macro_f1: field("best_macro_f1")?.as_f64().ok_or_else(|| bad("best_macro_f1"))?,
                params: ckpt.params(BEST)?,
            }),
            None => None,
        };
        Ok(TrainState {
            params,
            optimizer,
            epochs_done: field("epochs_done")?.as_u64().ok_or_else(|| bad("epochs_done"))? as usize,
            best,
            history: serde_json::from_value(field("history")?.clone())?,
        })
    }
}

/// Argmax class of every sample, in eval mode.
pub fn predict_labels(
    params: &ModelParameters,
    config: &EncoderConfig,
    samples: &[Sample],
    batch_size: usize,
) -> Result<Vec<Label>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let seqs: Vec<&[u32]> = chunk.iter().map(|s| s.ids.as_slice()).collect();
        let probs = predict(params, config, &Batch::from_sequences(&seqs))?;
        for row in probs.rows() {
            let mut best = 0;
            for k in 1..row.len() {
                if row[k] > row[best] {
                    best = k;
                }
            }
            out.push(Label::from_index(best).ok_or_else(|| Error::InvalidArgument("model has more than three classes".into()))?);
        }
    }
    Ok(out)
}

fn score(params: &ModelParameters, config: &EncoderConfig, samples: &[Sample], batch_size: usize) -> Result<FoldMetrics> {
    let predicted = predict_labels(params, config, samples, batch_size)?;
    let truth: Vec<Label> = samples.iter().map(|s| s.label).collect();
    evaluate(&predicted, &truth)
}

/// Fine-tune for every remaining epoch of `spec`; see [`train_until`].
pub fn train_classifier(
    state: TrainState,
    config: &EncoderConfig,
    train: &[Sample],
    valid: &[Sample],
    spec: &FineTuneSpec,
    log: &mut dyn FnMut(&TrainEvent),
) -> Result<TrainState> {
    train_until(state, config, train, valid, spec, spec.epochs, log)
}

/// Run epochs `state.epochs_done .. until` of the schedule defined by `spec`.
///
/// Each epoch applies the freeze plan, shuffles with an epoch-specific
/// stream of `spec.seed`, takes one AdamW step per batch and then scores the
/// validation set (the training set when `valid` is empty). The best epoch
/// by macro-F1 is kept. Parameters and moments are rounded to `f32` after
/// every step, so a run resumed from a checkpoint matches an uninterrupted one.
pub fn train_until(
    mut state: TrainState,
    config: &EncoderConfig,
    train: &[Sample],
    valid: &[Sample],
    spec: &FineTuneSpec,
    until: usize,
    log: &mut dyn FnMut(&TrainEvent),
) -> Result<TrainState> {
    spec.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if until > spec.epochs {
        return Err(Error::InvalidArgument(format!("epoch {until} beyond the {}-epoch budget", spec.epochs)));
    }
    let plan = fine_tune_plan(spec, train.len());
    let smoothing = SmoothingSpec::new(spec.smoothing_alpha, config.num_classes)?;
    let selection = if valid.is_empty() { train } else { valid };
    for epoch in state.epochs_done..until {
        let updatable = apply_freeze(epoch, &plan, config.num_layers);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(spec.batch_size) {
            let step = state.optimizer.t + 1;
            let seqs: Vec<&[u32]> = chunk.iter().map(|&i| train[i].ids.as_slice()).collect();
            let batch = Batch::from_sequences(&seqs).with_classes(chunk.iter().map(|&i| train[i].label.index()).collect());
            let mode = Mode::Train {
                seed: derive_seed(spec.seed, 1 << 40 | step as u64),
            };
            let out = classifier_loss_and_grad(&state.params, config, &batch, &smoothing, mode)?;
            if !out.loss.is_finite() {
                return Err(Error::InvalidArgument(format!("loss diverged at step {step}")));
            }
            adamw_step(&mut state.params, &out.grads, &mut state.optimizer, &plan, step, &updatable)?;
            state.params.round_to_f32();
            state.optimizer.round_to_f32();
            loss_sum += out.loss;
            batches += 1;
            log(&TrainEvent::Step {
                step,
                loss: out.loss,
                lr: plan.base_encoder_lr * schedule_lr(step, &plan)?,
            });
        }
        let metrics = score(&state.params, config, selection, spec.batch_size)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / batches as f64,
            valid_macro_f1: metrics.macro_f1,
        };
        if state.best.as_ref().is_none_or(|b| metrics.macro_f1 > b.macro_f1) {
            state.best = Some(BestEpoch {
                epoch,
                macro_f1: metrics.macro_f1,
                params: state.params.clone(),
            });
        }
        log(&TrainEvent::Epoch(record.clone()));
        state.history.push(record);
        state.epochs_done = epoch + 1;
    }
    Ok(state)
}

/// A k-fold cross-validation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KFoldRun {
    pub k: usize,
    pub seed: u64,
    /// Folds trained concurrently.
    pub jobs: usize,
    pub fine_tune: FineTuneSpec,
    pub augment: Option<AugmentSpec>,
}

#[derive(Debug, Clone)]
pub struct KFoldOutcome {
    pub split: FoldSplit,
    pub report: EvalReport,
}

/// Train one model per fold from `base` and score its best epoch on the
/// held-out fold. Fold `f` uses seed `run.seed + f`; augmentation, when
/// enabled, draws only from the fold's training part and uses `base` as the
/// masked-LM. Results do not depend on `run.jobs`.
pub fn run_kfold(
    base: &ModelParameters,
    config: &EncoderConfig,
    samples: &[Sample],
    run: &KFoldRun,
    log: &(dyn Fn(usize, &TrainEvent) + Sync),
) -> Result<KFoldOutcome> {
    let labels: Vec<Label> = samples.iter().map(|s| s.label).collect();
    let split = stratified_kfold(&labels, run.k, run.seed)?;
    if run.k < 2 {
        return Err(Error::InvalidArgument("k-fold evaluation needs k >= 2".into()));
    }
    let fold_job = |fold: usize| -> Result<FoldMetrics> {
        let seed = run.seed.wrapping_add(fold as u64);
        let mut train: Vec<Sample> = split.training(fold).into_iter().map(|i| samples[i].clone()).collect();
        let valid: Vec<Sample> = split.validation(fold).iter().map(|&i| samples[i].clone()).collect();
        if let Some(spec) = &run.augment {
            let extra = augment_corpus(&train, base, config, spec, seed)?;
            train.extend(extra);
        }
        let spec = FineTuneSpec {
            seed,
            ..run.fine_tune.clone()
        };
        let state = train_classifier(TrainState::new(base.clone()), config, &train, &valid, &spec, &mut |e| log(fold, e))?;
        score(state.selected(), config, &valid, spec.batch_size)
    };
    let mut results: Vec<Option<Result<FoldMetrics>>> = (0..run.k).map(|_| None).collect();
    let jobs = run.jobs.max(1);
    for start in (0..run.k).step_by(jobs) {
        let end = (start + jobs).min(run.k);
        std::thread::scope(|scope| {
            let handles: Vec<_> = (start..end).map(|f| scope.spawn(move || fold_job(f))).collect();
            for (f, h) in (start..end).zip(handles) {
                results[f] = Some(h.join().unwrap_or_else(|_| Err(Error::InvalidArgument(format!("fold {f} panicked")))));
            }
        });
    }
    let folds = results.into_iter().map(|r| r.expect("every fold ran")).collect::<Result<Vec<_>>>()?;
    Ok(KFoldOutcome {
        split,
        report: EvalReport::from_folds(folds)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{init_parameters, Depth};
    use crate::objectives::FusionSpec;

    fn config() -> EncoderConfig {
        EncoderConfig {
            num_layers: 2,
            hidden_size: 8,
            num_heads: 2,
            ffn_size: 16,
            max_positions: 8,
            vocab_size: 24,
            dropout_rate: 0.1,
            num_classes: 3,
            tie_mlm_head: true,
            fusion: FusionSpec::last_blocks(2, 2),
        }
    }

    /// Class `c` documents carry token `10 + c` somewhere.
    fn samples(n: usize) -> Vec<Sample> {
        (0..n)
            .map(|i| {
                let label = Label::from_index(i % 3).unwrap();
                let filler = 14 + (i * 5 % 9) as u32;
                let ids = if i % 2 == 0 {
                    vec![0, 10 + label.index() as u32, filler, 2]
                } else {
                    vec![0, filler, 10 + label.index() as u32, filler, 2]
                };
                Sample { ids, label }
            })
            .collect()
    }

    fn spec(epochs: usize) -> FineTuneSpec {
        FineTuneSpec {
            plan: TrainPlan {
                base_encoder_lr: 3e-3,
                head_lr: 1e-2,
                ..TrainPlan::default()
            },
            epochs,
            batch_size: 4,
            seed: 3,
            ..FineTuneSpec::default()
        }
    }

    #[test]
    fn plan_is_sized_from_the_training_set() {
        let plan = fine_tune_plan(&spec(3), 30);
        assert_eq!(plan.total_steps, 24);
        assert_eq!(plan.warmup_steps, 1);
        let mut s = spec(3);
        s.warmup_steps = Some(100);
        assert_eq!(fine_tune_plan(&s, 30).warmup_steps, 24);
    }

    #[test]
    fn frozen_epoch_leaves_encoder_untouched() {
        let c = config();
        let data = samples(24);
        let start = TrainState::new(init_parameters(&c, 1));
        let after = train_until(start.clone(), &c, &data, &[], &spec(3), 1, &mut |_| {}).unwrap();
        for ((info, a), (_, b)) in start.params.tensors().into_iter().zip(after.params.tensors()) {
            if info.depth == Depth::Head {
                if info.name.starts_with("classifier") {
                    assert_ne!(a, b, "{}", info.name);
                }
            } else {
                assert_eq!(a, b, "{}", info.name);
            }
        }
        let after2 = train_until(after, &c, &data, &[], &spec(3), 2, &mut |_| {}).unwrap();
        assert_ne!(after2.params.token_embedding, start.params.token_embedding);
    }

    #[test]
    fn deterministic_and_resumable() {
        let c = config();
        let data = samples(30);
        let (train, valid) = data.split_at(21);
        let fresh = TrainState::new(init_parameters(&c, 2));
        let mut events = Vec::new();
        let full = train_classifier(fresh.clone(), &c, train, valid, &spec(4), &mut |e| events.push(e.clone())).unwrap();
        assert_eq!(events.iter().filter(|e| matches!(e, TrainEvent::Epoch(_))).count(), 4);
        assert_eq!(full.history.len(), 4);
        let again = train_classifier(fresh.clone(), &c, train, valid, &spec(4), &mut |_| {}).unwrap();
        assert_eq!(full, again);

        let half = train_until(fresh, &c, train, valid, &spec(4), 2, &mut |_| {}).unwrap();
        let restored = TrainState::from_checkpoint(&Checkpoint::from_bytes(&half.to_checkpoint(&c).to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(restored, half);
        let resumed = train_classifier(restored, &c, train, valid, &spec(4), &mut |_| {}).unwrap();
        assert_eq!(resumed, full);
        let idle = train_classifier(resumed.clone(), &c, train, valid, &spec(4), &mut |_| {}).unwrap();
        assert_eq!(idle, resumed);
    }

    #[test]
    fn history_floats_survive_the_checkpoint() {
        let c = config();
        let mut state = TrainState::new(init_parameters(&c, 1));
        state.history = [1.0335137985380753, 0.1 + 0.2, 1e-300, std::f64::consts::PI]
            .iter()
            .enumerate()
            .map(|(epoch, &x)| EpochRecord { epoch, train_loss: x, valid_macro_f1: x / 3.0 })
            .collect();
        let bytes = state.to_checkpoint(&c).to_bytes().unwrap();
        let restored = TrainState::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(restored.history, state.history);
        assert_eq!(restored.to_checkpoint(&c).to_bytes().unwrap(), bytes);
    }

    #[test]
    fn best_epoch_is_kept() {
        let c = config();
        let data = samples(30);
        let state = train_classifier(TrainState::new(init_parameters(&c, 4)), &c, &data, &[], &spec(5), &mut |_| {}).unwrap();
        let best = state.best.as_ref().unwrap();
        let max = state.history.iter().map(|r| r.valid_macro_f1).fold(f64::MIN, f64::max);
        assert_eq!(best.macro_f1, max);
        assert_eq!(state.history[best.epoch].valid_macro_f1, max);
        let rescored = score(&best.params, &c, &data, 4).unwrap();
        assert_eq!(rescored.macro_f1, best.macro_f1);
    }

    #[test]
    fn kfold_is_independent_of_jobs() {
        let c = config();
        let data = samples(30);
        let base = init_parameters(&c, 5);
        let mut run = KFoldRun {
            k: 3,
            seed: 11,
            jobs: 1,
            fine_tune: spec(2),
            augment: Some(AugmentSpec { repetitions: 2, ..AugmentSpec::default() }),
        };
        let serial = run_kfold(&base, &c, &data, &run, &|_, _| {}).unwrap();
        run.jobs = 3;
        let parallel = run_kfold(&base, &c, &data, &run, &|_, _| {}).unwrap();
        assert_eq!(serial.report, parallel.report);
        assert_eq!(serial.report.folds.len(), 3);
        run.k = 1;
        assert!(run_kfold(&base, &c, &data, &run, &|_, _| {}).is_err());
    }
}
