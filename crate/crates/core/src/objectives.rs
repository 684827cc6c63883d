//! Task heads and losses: masked-LM projection, the fused-feature
//! classification head and label-smoothed cross-entropy.

use ndarray::{s, Array1, Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{
    backward, forward, Batch, BlockUpstream, EncoderConfig, ForwardPass, Linear, Mode, ModelParameters,
    Targets,
};
use crate::error::{Error, Result};

/// Probability floor used before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombineMode {
    Concatenate,
    Add,
}

/// Which blocks feed the classifier and how their `<s>` vectors are combined.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionSpec {
    /// 1-based, strictly increasing.
    pub blocks: Vec<usize>,
    pub mode: CombineMode,
}

impl FusionSpec {
    pub fn new(blocks: Vec<usize>, mode: CombineMode) -> Result<Self> {
        let spec = FusionSpec { blocks, mode };
        if spec.blocks.is_empty() || spec.blocks.windows(2).any(|w| w[0] >= w[1]) || spec.blocks[0] == 0 {
            return Err(Error::InvalidArgument(
                "fusion blocks must be nonempty, 1-based and strictly increasing".into(),
            ));
        }
        Ok(spec)
    }

    /// Concatenation of the last `count` of `num_layers` blocks.
    pub fn last_blocks(num_layers: usize, count: usize) -> Self {
        let first = num_layers.saturating_sub(count) + 1;
        FusionSpec {
            blocks: (first..=num_layers).collect(),
            mode: CombineMode::Concatenate,
        }
    }

    pub fn output_dim(&self, hidden_size: usize) -> usize {
        match self.mode {
            CombineMode::Concatenate => self.blocks.len() * hidden_size,
            CombineMode::Add => hidden_size,
        }
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        Self::new(self.blocks.clone(), self.mode)?;
        match self.blocks.iter().find(|&&b| b > num_layers) {
            Some(&index) => Err(Error::IndexOutOfRange {
                index,
                layers: num_layers,
            }),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothingSpec {
    pub alpha: f64,
    pub num_classes: usize,
}

impl SmoothingSpec {
    pub fn new(alpha: f64, num_classes: usize) -> Result<Self> {
        if !(0.0..1.0).contains(&alpha) || num_classes == 0 {
            return Err(Error::InvalidArgument(format!(
                "smoothing alpha {alpha} must be in [0,1) with at least one class"
            )));
        }
        Ok(SmoothingSpec { alpha, num_classes })
    }

    /// Smoothed target for class `index` without going through a one-hot vector.
    pub fn target_for(&self, index: usize) -> Vec<f64> {
        let k = self.num_classes as f64;
        (0..self.num_classes)
            .map(|i| if i == index { 1.0 - self.alpha + self.alpha / k } else { self.alpha / k })
            .collect()
    }
}

/// `y'_k = y_k (1 - alpha) + alpha / K`.
pub fn smooth_labels(one_hot: &[f64], spec: &SmoothingSpec) -> Result<Vec<f64>> {
    if one_hot.len() != spec.num_classes {
        return Err(Error::LengthMismatch {
            left: one_hot.len(),
            right: spec.num_classes,
        });
    }
    let ones = one_hot.iter().filter(|&&y| y == 1.0).count();
    if ones != 1 || one_hot.iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::NotOneHot);
    }
    let uniform = spec.alpha / spec.num_classes as f64;
    Ok(one_hot.iter().map(|&y| y * (1.0 - spec.alpha) + uniform).collect())
}

/// `-sum_i target_i * ln(predicted_i)` with predictions floored at [`PROB_FLOOR`].
pub fn cross_entropy(target: &[f64], predicted: &[f64]) -> Result<f64> {
    if target.len() != predicted.len() {
        return Err(Error::LengthMismatch {
            left: target.len(),
            right: predicted.len(),
        });
    }
    Ok(-target
        .iter()
        .zip(predicted)
        .map(|(&t, &p)| if t == 0.0 { 0.0 } else { t * p.max(PROB_FLOOR).ln() })
        .sum::<f64>())
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln()
}

/// `<s>` vectors of the selected blocks, concatenated or summed: `B × D`.
pub fn fuse_features(pass: &ForwardPass, fusion: &FusionSpec) -> Result<Array2<f64>> {
    fusion.validate(pass.num_layers())?;
    let b_size = pass.batch_size();
    let hidden = pass.block_output(0, 1).ncols();
    let mut fused = Array2::zeros((b_size, fusion.output_dim(hidden)));
    for b in 0..b_size {
        for (slot, &layer) in fusion.blocks.iter().enumerate() {
            let cls = pass.block_output(b, layer).row(0).to_owned();
            match fusion.mode {
                CombineMode::Concatenate => fused
                    .slice_mut(s![b, slot * hidden..(slot + 1) * hidden])
                    .assign(&cls),
                CombineMode::Add => {
                    let mut row = fused.row_mut(b);
                    row += &cls;
                }
            }
        }
    }
    Ok(fused)
}

/// Row-wise `softmax(fused · W + b)`.
pub fn classify(fused: &Array2<f64>, head: &Linear) -> Result<Array2<f64>> {
    Ok(softmax_rows(&logits(fused, head)?))
}

fn logits(fused: &Array2<f64>, head: &Linear) -> Result<Array2<f64>> {
    if fused.ncols() != head.weight.nrows() || head.bias.len() != head.weight.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "features of width {} for a head of shape {:?}",
            fused.ncols(),
            head.weight.dim()
        )));
    }
    Ok(fused.dot(&head.weight) + &head.bias)
}

fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut probs = logits.clone();
    for mut row in probs.rows_mut() {
        let p = softmax(row.as_slice().unwrap());
        row.assign(&Array1::from(p));
    }
    probs
}

/// Class probabilities for a batch in evaluation mode.
pub fn predict(params: &ModelParameters, config: &EncoderConfig, batch: &Batch) -> Result<Array2<f64>> {
    let pass = forward(params, config, batch, Mode::Eval)?;
    classify(&fuse_features(&pass, &config.fusion)?, &params.classifier)
}

/// Scatter a `B × D` gradient on fused features back onto block outputs.
fn unfuse_gradient(
    d_fused: &Array2<f64>,
    fusion: &FusionSpec,
    num_layers: usize,
    seq_len: usize,
    hidden: usize,
) -> BlockUpstream {
    let mut upstream: BlockUpstream = vec![None; num_layers];
    for (slot, &layer) in fusion.blocks.iter().enumerate() {
        let mut g = Array3::zeros((d_fused.nrows(), seq_len, hidden));
        for b in 0..d_fused.nrows() {
            let src = match fusion.mode {
                CombineMode::Concatenate => d_fused.slice(s![b, slot * hidden..(slot + 1) * hidden]),
                CombineMode::Add => d_fused.row(b),
            };
            g.slice_mut(s![b, 0, ..]).assign(&src);
        }
        upstream[layer - 1] = Some(g);
    }
    upstream
}

#[derive(Debug, Clone)]
pub struct LossAndGrad {
    /// Mean loss over the scored items.
    pub loss: f64,
    pub grads: ModelParameters,
    /// Class probabilities for classification batches; empty for MLM.
    pub probs: Array2<f64>,
}

/// Mean label-smoothed cross-entropy of the classification head and its gradient.
pub fn classifier_loss_and_grad(
    params: &ModelParameters,
    config: &EncoderConfig,
    batch: &Batch,
    smoothing: &SmoothingSpec,
    mode: Mode,
) -> Result<LossAndGrad> {
    let Targets::Classes(classes) = &batch.targets else {
        return Err(Error::InvalidArgument("batch has no class targets".into()));
    };
    let pass = forward(params, config, batch, mode)?;
    let mut fused = fuse_features(&pass, &config.fusion)?;
    let feature_mask = match mode {
        Mode::Train { seed } if config.dropout_rate > 0.0 => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(u64::MAX);
            let keep = 1.0 / (1.0 - config.dropout_rate);
            let rate = config.dropout_rate;
            let mask = Array2::from_shape_simple_fn(fused.raw_dim(), || {
                if rng.random::<f64>() < rate { 0.0 } else { keep }
            });
            fused *= &mask;
            Some(mask)
        }
        _ => None,
    };
    let z = logits(&fused, &params.classifier)?;
    let b_size = batch.batch_size() as f64;
    let mut loss = 0.0;
    let mut probs = Array2::zeros(z.raw_dim());
    let mut d_logits = Array2::zeros(z.raw_dim());
    for (b, &class) in classes.iter().enumerate() {
        if class >= config.num_classes {
            return Err(Error::InvalidArgument(format!("class index {class} out of range")));
        }
        let row = z.row(b).to_vec();
        let target = smoothing.target_for(class);
        let lse = log_sum_exp(&row);
        loss += lse - target.iter().zip(&row).map(|(t, z)| t * z).sum::<f64>();
        let p = softmax(&row);
        for k in 0..p.len() {
            probs[[b, k]] = p[k];
            d_logits[[b, k]] = (p[k] - target[k]) / b_size;
        }
    }
    let mut head_grad = Linear {
        weight: fused.t().dot(&d_logits),
        bias: d_logits.sum_axis(Axis(0)),
    };
    let mut d_fused = d_logits.dot(&params.classifier.weight.t());
    if let Some(mask) = &feature_mask {
        d_fused *= mask;
    }
    let upstream = unfuse_gradient(&d_fused, &config.fusion, config.num_layers, pass.seq_len(), config.hidden_size);
    let mut grads = backward(params, config, &pass, &upstream)?;
    std::mem::swap(&mut grads.classifier, &mut head_grad);
    Ok(LossAndGrad {
        loss: loss / b_size,
        grads,
        probs,
    })
}

struct MlmRows {
    /// `(b, t, target)` of every scored position.
    positions: Vec<(usize, usize, u32)>,
    hidden: Array2<f64>,
    logits: Array2<f64>,
}

fn mlm_rows(pass: &ForwardPass, params: &ModelParameters, batch: &Batch) -> Result<MlmRows> {
    let Targets::Mlm { targets, loss_mask } = &batch.targets else {
        return Err(Error::InvalidArgument("batch has no MLM targets".into()));
    };
    let positions: Vec<(usize, usize, u32)> = loss_mask
        .indexed_iter()
        .filter(|(_, &m)| m)
        .map(|((b, t), _)| (b, t, targets[[b, t]]))
        .collect();
    if positions.is_empty() {
        return Err(Error::NoMaskedPositions);
    }
    let last = pass.num_layers();
    let width = params.token_embedding.ncols();
    let mut hidden = Array2::zeros((positions.len(), width));
    for (row, &(b, t, _)) in positions.iter().enumerate() {
        hidden.row_mut(row).assign(&pass.block_output(b, last).row(t));
    }
    let logits = match &params.mlm_weight {
        Some(w) => hidden.dot(w),
        None => hidden.dot(&params.token_embedding.t()),
    } + &params.mlm_bias;
    Ok(MlmRows {
        positions,
        hidden,
        logits,
    })
}

/// Vocabulary logits of the MLM head at position `t` of sequence `b`.
pub fn mlm_logits_at(pass: &ForwardPass, params: &ModelParameters, b: usize, t: usize) -> Array1<f64> {
    let hidden = pass.block_output(b, pass.num_layers());
    let h = hidden.row(t);
    let projected = match &params.mlm_weight {
        Some(w) => h.dot(w),
        None => params.token_embedding.dot(&h),
    };
    projected + &params.mlm_bias
}

/// Mean cross-entropy over masked positions, scored from the last block.
pub fn mlm_loss(pass: &ForwardPass, params: &ModelParameters, batch: &Batch) -> Result<f64> {
    let rows = mlm_rows(pass, params, batch)?;
    let total: f64 = rows
        .positions
        .iter()
        .zip(rows.logits.rows())
        .map(|(&(_, _, target), z)| {
            let z = z.as_slice().unwrap();
            log_sum_exp(z) - z[target as usize]
        })
        .sum();
    Ok(total / rows.positions.len() as f64)
}

pub fn mlm_loss_and_grad(
    params: &ModelParameters,
    config: &EncoderConfig,
    batch: &Batch,
    mode: Mode,
) -> Result<LossAndGrad> {
    let pass = forward(params, config, batch, mode)?;
    let rows = mlm_rows(&pass, params, batch)?;
    let n = rows.positions.len() as f64;
    let mut loss = 0.0;
    let mut d_logits = Array2::zeros(rows.logits.raw_dim());
    for (i, &(_, _, target)) in rows.positions.iter().enumerate() {
        let z = rows.logits.row(i);
        let z = z.as_slice().unwrap();
        loss += log_sum_exp(z) - z[target as usize];
        let p = softmax(z);
        let mut d = d_logits.row_mut(i);
        for (k, pk) in p.into_iter().enumerate() {
            d[k] = pk / n;
        }
        d[target as usize] -= 1.0 / n;
    }
    let d_hidden = match &params.mlm_weight {
        Some(w) => d_logits.dot(&w.t()),
        None => d_logits.dot(&params.token_embedding),
    };
    let mut upstream_last = Array3::zeros((pass.batch_size(), pass.seq_len(), config.hidden_size));
    for (i, &(b, t, _)) in rows.positions.iter().enumerate() {
        let mut dst = upstream_last.slice_mut(s![b, t, ..]);
        dst += &d_hidden.row(i);
    }
    let mut upstream: BlockUpstream = vec![None; config.num_layers];
    upstream[config.num_layers - 1] = Some(upstream_last);
    let mut grads = backward(params, config, &pass, &upstream)?;
    grads.mlm_bias += &d_logits.sum_axis(Axis(0));
    match &mut grads.mlm_weight {
        Some(w) => *w += &rows.hidden.t().dot(&d_logits),
        None => grads.token_embedding += &d_logits.t().dot(&rows.hidden),
    }
    Ok(LossAndGrad {
        loss: loss / n,
        grads,
        probs: Array2::zeros((0, 0)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::init_parameters;
    use proptest::prelude::*;

    #[test]
    fn smoothing_identity_at_zero() {
        let spec = SmoothingSpec::new(0.0, 3).unwrap();
        assert_eq!(smooth_labels(&[0.0, 1.0, 0.0], &spec).unwrap(), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn smoothing_values() {
        let spec = SmoothingSpec::new(0.2, 3).unwrap();
        let y = smooth_labels(&[1.0, 0.0, 0.0], &spec).unwrap();
        let expected = [0.8 + 0.2 / 3.0, 0.2 / 3.0, 0.2 / 3.0];
        for (a, e) in y.iter().zip(expected) {
            assert!((a - e).abs() < 1e-9);
        }
        assert!((y[0] - 0.86667).abs() < 1e-5 && (y[1] - 0.06667).abs() < 1e-5);
        assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(spec.target_for(0), y);
    }

    #[test]
    fn smoothing_limit_is_uniform() {
        let eps = 1e-6;
        let spec = SmoothingSpec::new(1.0 - eps, 3).unwrap();
        for v in smooth_labels(&[0.0, 0.0, 1.0], &spec).unwrap() {
            assert!((v - 1.0 / 3.0).abs() <= eps);
        }
    }

    #[test]
    fn smoothing_rejects_bad_input() {
        let spec = SmoothingSpec::new(0.2, 3).unwrap();
        assert!(matches!(smooth_labels(&[0.5, 0.5, 0.0], &spec), Err(Error::NotOneHot)));
        assert!(matches!(smooth_labels(&[1.0, 1.0, 0.0], &spec), Err(Error::NotOneHot)));
        assert!(matches!(smooth_labels(&[0.0, 0.0, 0.0], &spec), Err(Error::NotOneHot)));
        assert!(smooth_labels(&[1.0, 0.0], &spec).is_err());
        assert!(SmoothingSpec::new(1.0, 3).is_err());
    }

    #[test]
    fn cross_entropy_values() {
        assert_eq!(cross_entropy(&[0.0, 1.0, 0.0], &[0.0, 1.0, 0.0]).unwrap(), 0.0);
        let third = 1.0 / 3.0;
        let u = cross_entropy(&[third; 3], &[third; 3]).unwrap();
        assert!((u - 3f64.ln()).abs() < 1e-12);
        // -(0.86667 ln 0.7 + 0.06667 ln 0.2 + 0.06667 ln 0.1)
        let oracle = -(0.86667f64 * 0.7f64.ln() + 0.06667 * 0.2f64.ln() + 0.06667 * 0.1f64.ln());
        let v = cross_entropy(&[0.86667, 0.06667, 0.06667], &[0.7, 0.2, 0.1]).unwrap();
        assert!((v - oracle).abs() < 1e-12);
        assert!((v - 0.5699).abs() < 1e-3);
        assert!(matches!(cross_entropy(&[1.0], &[0.5, 0.5]), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn fusion_spec_rules() {
        assert!(FusionSpec::new(vec![], CombineMode::Add).is_err());
        assert!(FusionSpec::new(vec![2, 1], CombineMode::Add).is_err());
        assert!(FusionSpec::new(vec![0, 1], CombineMode::Add).is_err());
        let spec = FusionSpec::new((9..=12).collect(), CombineMode::Concatenate).unwrap();
        assert_eq!(spec.output_dim(768), 3072);
        assert!(matches!(spec.validate(8), Err(Error::IndexOutOfRange { index: 9, layers: 8 })));
        assert_eq!(FusionSpec::last_blocks(12, 6).blocks, (7..=12).collect::<Vec<_>>());
    }

    fn tiny_config(fusion: FusionSpec) -> EncoderConfig {
        EncoderConfig {
            num_layers: 2,
            hidden_size: 8,
            num_heads: 2,
            ffn_size: 16,
            max_positions: 8,
            vocab_size: 20,
            dropout_rate: 0.0,
            num_classes: 3,
            tie_mlm_head: true,
            fusion,
        }
    }

    fn tiny_batch() -> Batch {
        Batch::from_sequences(&[vec![0u32, 9, 10, 2], vec![0, 11, 2]])
    }

    #[test]
    fn fuse_concatenate_and_add() {
        let config = tiny_config(FusionSpec::last_blocks(2, 2));
        let params = init_parameters(&config, 3);
        let pass = forward(&params, &config, &tiny_batch(), Mode::Eval).unwrap();
        let v1 = pass.block_output(1, 1).row(0).to_owned();
        let v2 = pass.block_output(1, 2).row(0).to_owned();

        let cat = fuse_features(&pass, &FusionSpec::new(vec![1, 2], CombineMode::Concatenate).unwrap()).unwrap();
        assert_eq!(cat.dim(), (2, 16));
        assert_eq!(cat.slice(s![1, 0..8]), v1);
        assert_eq!(cat.slice(s![1, 8..16]), v2);

        let single = fuse_features(&pass, &FusionSpec::new(vec![2], CombineMode::Concatenate).unwrap()).unwrap();
        assert_eq!(single.row(1), v2);

        let add = fuse_features(&pass, &FusionSpec::new(vec![1, 2], CombineMode::Add).unwrap()).unwrap();
        assert_eq!(add.row(1), &v1 + &v2);

        let bad = FusionSpec::new(vec![3], CombineMode::Add).unwrap();
        assert!(matches!(fuse_features(&pass, &bad), Err(Error::IndexOutOfRange { .. })));
    }

    #[test]
    fn concatenation_slices_are_independent() {
        let config = tiny_config(FusionSpec::last_blocks(2, 2));
        let params = init_parameters(&config, 4);
        let pass = forward(&params, &config, &tiny_batch(), Mode::Eval).unwrap();
        let fusion = FusionSpec::new(vec![1, 2], CombineMode::Concatenate).unwrap();
        let full = fuse_features(&pass, &fusion).unwrap();
        let mut zeroed = full.clone();
        zeroed.slice_mut(s![.., 0..8]).fill(0.0);
        let changed: Vec<usize> = (0..16).filter(|&c| full[[0, c]] != zeroed[[0, c]]).collect();
        assert!(changed.iter().all(|&c| c < 8));
        assert_eq!(full.slice(s![.., 8..]), zeroed.slice(s![.., 8..]));
    }

    #[test]
    fn zero_head_is_uniform() {
        let head = Linear {
            weight: Array2::zeros((4, 3)),
            bias: Array1::zeros(3),
        };
        let probs = classify(&Array2::from_elem((2, 4), 0.7), &head).unwrap();
        for p in probs.iter() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!(matches!(
            classify(&Array2::zeros((2, 5)), &head),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn mlm_loss_of_uniform_logits_is_ln_v() {
        let config = tiny_config(FusionSpec::last_blocks(2, 1));
        let mut params = init_parameters(&config, 5);
        params.token_embedding.fill(0.0);
        let mut batch = tiny_batch();
        let mut mask = Array2::from_elem(batch.token_ids.dim(), false);
        mask[[0, 1]] = true;
        mask[[1, 1]] = true;
        batch.targets = Targets::Mlm {
            targets: batch.token_ids.clone(),
            loss_mask: mask,
        };
        let pass = forward(&params, &config, &batch, Mode::Eval).unwrap();
        let loss = mlm_loss(&pass, &params, &batch).unwrap();
        assert!((loss - (20f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn mlm_loss_is_mean_over_masked_positions() {
        let config = tiny_config(FusionSpec::last_blocks(2, 1));
        let params = init_parameters(&config, 6);
        let base = tiny_batch();
        let with_mask = |cells: &[(usize, usize)]| {
            let mut mask = Array2::from_elem(base.token_ids.dim(), false);
            for &c in cells {
                mask[c] = true;
            }
            let mut b = base.clone();
            b.targets = Targets::Mlm {
                targets: base.token_ids.clone(),
                loss_mask: mask,
            };
            b
        };
        let pass = forward(&params, &config, &base, Mode::Eval).unwrap();
        let a = mlm_loss(&pass, &params, &with_mask(&[(0, 1)])).unwrap();
        let b = mlm_loss(&pass, &params, &with_mask(&[(1, 1)])).unwrap();
        let both = mlm_loss(&pass, &params, &with_mask(&[(0, 1), (1, 1)])).unwrap();
        assert!((both - (a + b) / 2.0).abs() < 1e-12);
        assert!(matches!(
            mlm_loss(&pass, &params, &with_mask(&[])),
            Err(Error::NoMaskedPositions)
        ));
    }

    #[test]
    fn mlm_loss_near_zero_for_confident_head() {
        let mut config = tiny_config(FusionSpec::last_blocks(2, 1));
        config.tie_mlm_head = false;
        let mut params = init_parameters(&config, 7);
        params.mlm_weight.as_mut().unwrap().fill(0.0);
        params.mlm_bias.fill(-50.0);
        params.mlm_bias[13] = 50.0;
        let mut batch = Batch::from_sequences(&[vec![0u32, 13, 2]]);
        let mut mask = Array2::from_elem((1, 3), false);
        mask[[0, 1]] = true;
        batch.targets = Targets::Mlm {
            targets: batch.token_ids.clone(),
            loss_mask: mask,
        };
        let pass = forward(&params, &config, &batch, Mode::Eval).unwrap();
        assert!(mlm_loss(&pass, &params, &batch).unwrap() < 1e-12);
    }

    proptest! {
        #[test]
        fn smoothing_preserves_argmax(alpha in 0.0f64..0.66, k in 2usize..8, hot in 0usize..8) {
            let hot = hot % k;
            let spec = SmoothingSpec::new(alpha, k).unwrap();
            let mut one_hot = vec![0.0; k];
            one_hot[hot] = 1.0;
            let y = smooth_labels(&one_hot, &spec).unwrap();
            prop_assume!(alpha < (k as f64 - 1.0) / k as f64);
            let arg = y.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0;
            prop_assert_eq!(arg, hot);
            prop_assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn smoothed_loss_obeys_gibbs(alpha in 0.01f64..0.9, hot in 0usize..3, raw in prop::collection::vec(0.01f64..1.0, 3)) {
            let spec = SmoothingSpec::new(alpha, 3).unwrap();
            let target = spec.target_for(hot);
            let total: f64 = raw.iter().sum();
            let predicted: Vec<f64> = raw.iter().map(|r| r / total).collect();
            let floor = cross_entropy(&target, &target).unwrap();
            prop_assert!(cross_entropy(&target, &predicted).unwrap() >= floor - 1e-12);
        }

        #[test]
        fn softmax_rows_sum_to_one(values in prop::collection::vec(-30.0f64..30.0, 12), shift in -100.0f64..100.0) {
            let head = Linear { weight: Array2::eye(4), bias: Array1::zeros(4) };
            let fused = Array2::from_shape_vec((3, 4), values).unwrap();
            let probs = classify(&fused, &head).unwrap();
            for row in probs.rows() {
                prop_assert!((row.sum() - 1.0).abs() < 1e-6);
            }
            let shifted = classify(&fused.mapv(|v| v + shift), &head).unwrap();
            for (a, b) in probs.rows().into_iter().zip(shifted.rows()) {
                let arg = |r: ndarray::ArrayView1<f64>| r.iter().enumerate().max_by(|x, y| x.1.partial_cmp(y.1).unwrap()).unwrap().0;
                prop_assert_eq!(arg(a), arg(b));
            }
        }
    }
}
