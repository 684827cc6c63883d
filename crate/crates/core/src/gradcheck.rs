//! Central finite-difference verification of the analytic backward pass.
//!
//! The probe loss touches every parameter: label-smoothed classification
//! through the fused head, masked-LM through the output projection, and a
//! fixed random projection of every block's hidden states.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::encoder::{backward, forward, init_parameters, Batch, EncoderConfig, Mode, ModelParameters, Targets};
use crate::error::Result;
use crate::objectives::{classifier_loss_and_grad, mlm_loss, mlm_loss_and_grad, SmoothingSpec};
use crate::tokenizer::NUM_SPECIALS;

/// Below this magnitude the relative error is measured against the floor instead.
pub const MAGNITUDE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct EntryError {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries_checked: usize,
    /// Worst entry by relative error.
    pub worst: Option<EntryError>,
    /// Worst relative error per tensor, in canonical tensor order.
    pub per_tensor: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.worst.as_ref().map_or(0.0, |w| w.relative)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR)
}

/// Fixed inputs of the probe loss.
pub struct Probe {
    pub config: EncoderConfig,
    classes: Batch,
    mlm: Batch,
    projections: Vec<Array3<f64>>,
    smoothing: SmoothingSpec,
}

impl Probe {
    /// Random sequences (the second one shorter, so padding is exercised), targets and projections.
    pub fn new(config: EncoderConfig, batch_size: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = config.max_positions;
        let v = config.vocab_size as u32;
        let sequences: Vec<Vec<u32>> = (0..batch_size)
            .map(|b| {
                let len = if b % 2 == 1 { (t / 2).max(2) } else { t };
                (0..len).map(|_| rng.random_range(NUM_SPECIALS as u32..v)).collect()
            })
            .collect();
        let base = Batch::from_sequences(&sequences);
        let classes = base
            .clone()
            .with_classes((0..batch_size).map(|_| rng.random_range(0..config.num_classes)).collect());
        let mut loss_mask = Array2::from_elem(base.token_ids.raw_dim(), false);
        let mut targets = Array2::zeros(base.token_ids.raw_dim());
        for (b, seq) in sequences.iter().enumerate() {
            for i in 0..seq.len() {
                if i == 0 || rng.random::<f64>() < 0.4 {
                    loss_mask[[b, i]] = true;
                    targets[[b, i]] = rng.random_range(0..v);
                }
            }
        }
        let mlm = Batch {
            targets: Targets::Mlm { targets, loss_mask },
            ..base.clone()
        };
        let shape = (batch_size, base.seq_len(), config.hidden_size);
        let projections = (0..config.num_layers)
            .map(|_| Array3::from_shape_simple_fn(shape, || rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let smoothing = SmoothingSpec::new(0.2, config.num_classes)?;
        Ok(Probe {
            config,
            classes,
            mlm,
            projections,
            smoothing,
        })
    }

    pub fn loss(&self, params: &ModelParameters) -> Result<f64> {
        let cls = classifier_loss_and_grad(params, &self.config, &self.classes, &self.smoothing, Mode::Eval)?.loss;
        let pass = forward(params, &self.config, &self.mlm, Mode::Eval)?;
        let mlm = mlm_loss(&pass, params, &self.mlm)?;
        let projected: f64 = pass
            .hidden_states()
            .iter()
            .zip(&self.projections)
            .map(|(h, r)| (h * r).sum())
            .sum();
        Ok(cls + mlm + projected)
    }

    pub fn gradient(&self, params: &ModelParameters) -> Result<ModelParameters> {
        let mut grads = classifier_loss_and_grad(params, &self.config, &self.classes, &self.smoothing, Mode::Eval)?.grads;
        grads.add_assign(&mlm_loss_and_grad(params, &self.config, &self.mlm, Mode::Eval)?.grads);
        let pass = forward(params, &self.config, &self.mlm, Mode::Eval)?;
        let upstream = self.projections.iter().cloned().map(Some).collect();
        grads.add_assign(&backward(params, &self.config, &pass, &upstream)?);
        Ok(grads)
    }
}

/// Compare every analytic gradient entry against `(f(x+h) - f(x-h)) / 2h`.
pub fn check_gradients(config: &EncoderConfig, batch_size: usize, seed: u64, step: f64) -> Result<GradCheckReport> {
    let probe = Probe::new(config.clone(), batch_size, seed)?;
    let mut params = init_parameters(config, seed);
    // Larger weights than the default init so every path carries a visible signal.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for (_, data) in params.tensors_mut() {
        for x in data.iter_mut() {
            *x += 0.1 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let analytic = probe.gradient(&params)?;
    let analytic: Vec<(String, Vec<f64>)> = analytic
        .tensors()
        .into_iter()
        .map(|(info, d)| (info.name, d.to_vec()))
        .collect();

    let mut report = GradCheckReport {
        entries_checked: 0,
        worst: None,
        per_tensor: Vec::new(),
    };
    for (tensor_index, (name, grad)) in analytic.iter().enumerate() {
        let mut tensor_worst: f64 = 0.0;
        for (i, &a) in grad.iter().enumerate() {
            let original = params.tensors()[tensor_index].1[i];
            set_entry(&mut params, tensor_index, i, original + step);
            let plus = probe.loss(&params)?;
            set_entry(&mut params, tensor_index, i, original - step);
            let minus = probe.loss(&params)?;
            set_entry(&mut params, tensor_index, i, original);
            let numeric = (plus - minus) / (2.0 * step);
            let rel = relative_error(a, numeric);
            tensor_worst = tensor_worst.max(rel);
            report.entries_checked += 1;
            if report.worst.as_ref().is_none_or(|w| rel > w.relative) {
                report.worst = Some(EntryError {
                    tensor: name.clone(),
                    index: i,
                    analytic: a,
                    numeric,
                    relative: rel,
                });
            }
        }
        report.per_tensor.push((name.clone(), tensor_worst));
    }
    Ok(report)
}

fn set_entry(params: &mut ModelParameters, tensor: usize, index: usize, value: f64) {
    params.tensors_mut()[tensor].1[index] = value;
}
