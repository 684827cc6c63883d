//! AdamW with decay-group exclusions, a warm-up/linear-decay schedule,
//! geometric block-wise learning rates and freeze-then-unfreeze.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::encoder::{DecayGroup, Depth, ModelParameters};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainPlan {
    pub base_encoder_lr: f64,
    pub head_lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub epsilon: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub freeze_epochs: usize,
    /// Per-block learning-rate factor; block `l` gets `base * decay^(L - l)`.
    pub blockwise_decay: f64,
}

impl Default for TrainPlan {
    fn default() -> Self {
        TrainPlan {
            base_encoder_lr: 1e-5,
            head_lr: 1e-4,
            weight_decay: 0.01,
            betas: (0.9, 0.999),
            epsilon: 1e-8,
            warmup_steps: 0,
            total_steps: 0,
            freeze_epochs: 1,
            blockwise_decay: 0.9,
        }
    }
}

impl TrainPlan {
    /// Single learning rate for every group, no freezing, no block-wise ramp.
    pub fn uniform(lr: f64, warmup_steps: usize, total_steps: usize) -> Self {
        TrainPlan {
            base_encoder_lr: lr,
            head_lr: lr,
            warmup_steps,
            total_steps,
            freeze_epochs: 0,
            blockwise_decay: 1.0,
            ..TrainPlan::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.base_encoder_lr >= 0.0 && self.head_lr >= 0.0) {
            problems.push("learning rates must be non-negative".to_string());
        }
        if !(self.weight_decay >= 0.0) {
            problems.push("weight_decay must be non-negative".into());
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            problems.push("betas must lie in [0,1)".into());
        }
        if !(self.epsilon > 0.0) {
            problems.push("epsilon must be positive".into());
        }
        if self.warmup_steps > self.total_steps {
            problems.push(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            ));
        }
        if !(self.blockwise_decay > 0.0 && self.blockwise_decay <= 1.0) {
            problems.push("blockwise_decay must lie in (0,1]".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems.join("; ")))
        }
    }
}

/// One eighth of an epoch, rounded up.
pub fn default_warmup(steps_per_epoch: usize) -> usize {
    steps_per_epoch.div_ceil(8)
}

/// Learning-rate multiplier: linear 0→1 over the warm-up, then linear 1→0 at `total_steps`.
pub fn schedule_lr(step: usize, plan: &TrainPlan) -> Result<f64> {
    let (warmup, total) = (plan.warmup_steps, plan.total_steps);
    if step > total {
        return Err(Error::StepOutOfRange { step, total });
    }
    if warmup > 0 && step <= warmup {
        return Ok(step as f64 / warmup as f64);
    }
    Ok((total - step) as f64 / (total - warmup) as f64)
}

pub fn layer_lr(depth: Depth, plan: &TrainPlan, num_layers: usize) -> f64 {
    let decay = plan.blockwise_decay;
    match depth {
        Depth::Head => plan.head_lr,
        Depth::Block(l) => plan.base_encoder_lr * decay.powi((num_layers - l.min(num_layers)) as i32),
        Depth::Embedding => plan.base_encoder_lr * decay.powi(num_layers as i32),
    }
}

/// Depth tags that may be updated during `epoch` (0-based).
pub fn apply_freeze(epoch: usize, plan: &TrainPlan, num_layers: usize) -> BTreeSet<Depth> {
    if epoch < plan.freeze_epochs {
        BTreeSet::from([Depth::Head])
    } else {
        Depth::all(num_layers).into_iter().collect()
    }
}

/// Adam moments shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub first_moment: ModelParameters,
    pub second_moment: ModelParameters,
    /// Global step counter, drives the schedule.
    pub t: usize,
    /// Updates applied to each tensor, drives bias correction. Frozen tensors do not advance.
    pub tensor_steps: Vec<u64>,
}

impl OptimizerState {
    pub fn new(params: &ModelParameters) -> Self {
        OptimizerState {
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
            t: 0,
            tensor_steps: vec![0; params.tensors().len()],
        }
    }

    pub fn round_to_f32(&mut self) {
        self.first_moment.round_to_f32();
        self.second_moment.round_to_f32();
    }
}

/// One AdamW update at global `step` (must equal `state.t + 1`).
///
/// Weight decay is decoupled (`w -= lr * wd * w`) and skipped for bias and
/// LayerNorm tensors. Tensors whose depth is not in `updatable` keep their
/// values and moments untouched.
pub fn adamw_step(
    params: &mut ModelParameters,
    grads: &ModelParameters,
    state: &mut OptimizerState,
    plan: &TrainPlan,
    step: usize,
    updatable: &BTreeSet<Depth>,
) -> Result<()> {
    if step != state.t + 1 {
        return Err(Error::InvalidArgument(format!(
            "step {step} does not follow optimizer step {}",
            state.t
        )));
    }
    if !params.same_layout(grads)
        || !params.same_layout(&state.first_moment)
        || !params.same_layout(&state.second_moment)
        || state.tensor_steps.len() != params.tensors().len()
    {
        return Err(Error::ShapeMismatch("parameters, gradients and moments differ in layout".into()));
    }
    let multiplier = schedule_lr(step, plan)?;
    let num_layers = params.blocks.len();
    let (beta1, beta2) = plan.betas;

    let grads = grads.tensors();
    let m_all = state.first_moment.tensors_mut();
    let v_all = state.second_moment.tensors_mut();
    for ((((info, w), (_, g)), ((_, m), (_, v))), k) in params
        .tensors_mut()
        .into_iter()
        .zip(grads)
        .zip(m_all.into_iter().zip(v_all))
        .zip(state.tensor_steps.iter_mut())
    {
        if !updatable.contains(&info.depth) {
            continue;
        }
        *k += 1;
        let lr = layer_lr(info.depth, plan, num_layers) * multiplier;
        let decay = match info.group {
            DecayGroup::Decayable => 1.0 - lr * plan.weight_decay,
            DecayGroup::NoDecay => 1.0,
        };
        let correction1 = 1.0 - beta1.powi(*k as i32);
        let correction2 = 1.0 - beta2.powi(*k as i32);
        for i in 0..w.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let m_hat = m[i] / correction1;
            let v_hat = v[i] / correction2;
            w[i] = w[i] * decay - lr * m_hat / (v_hat.sqrt() + plan.epsilon);
        }
    }
    state.t = step;
    Ok(())
}
