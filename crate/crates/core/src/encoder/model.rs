use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{BlockParams, EncoderConfig, LayerNormParams, Linear, ModelParameters, LAYER_NORM_EPS};
use crate::error::{Error, Result};
use crate::tokenizer::PAD_ID;

/// What a batch is trained against.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    None,
    /// One class index per sequence.
    Classes(Vec<usize>),
    /// Original ids at masked positions; `loss_mask` marks the positions scored.
    Mlm {
        targets: Array2<u32>,
        loss_mask: Array2<bool>,
    },
}

/// Right-padded token ids with an attention mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub token_ids: Array2<u32>,
    pub attention_mask: Array2<bool>,
    pub targets: Targets,
}

impl Batch {
    pub fn from_sequences<S: AsRef<[u32]>>(sequences: &[S]) -> Self {
        let rows = sequences.len();
        let cols = sequences.iter().map(|s| s.as_ref().len()).max().unwrap_or(0);
        let mut token_ids = Array2::from_elem((rows, cols), PAD_ID);
        let mut attention_mask = Array2::from_elem((rows, cols), false);
        for (b, seq) in sequences.iter().enumerate() {
            for (t, &id) in seq.as_ref().iter().enumerate() {
                token_ids[[b, t]] = id;
                attention_mask[[b, t]] = true;
            }
        }
        Batch {
            token_ids,
            attention_mask,
            targets: Targets::None,
        }
    }

    pub fn with_classes(mut self, classes: Vec<usize>) -> Self {
        self.targets = Targets::Classes(classes);
        self
    }

    pub fn batch_size(&self) -> usize {
        self.token_ids.nrows()
    }

    pub fn seq_len(&self) -> usize {
        self.token_ids.ncols()
    }

    /// Unpadded ids of sequence `b`.
    pub fn sequence(&self, b: usize) -> Vec<u32> {
        self.token_ids
            .row(b)
            .iter()
            .zip(self.attention_mask.row(b))
            .filter(|(_, &m)| m)
            .map(|(&id, _)| id)
            .collect()
    }

    pub fn validate(&self, config: &EncoderConfig) -> Result<()> {
        if self.attention_mask.dim() != self.token_ids.dim() {
            return Err(Error::ShapeMismatch("attention mask differs from token ids".into()));
        }
        if self.seq_len() > config.max_positions {
            return Err(Error::SequenceTooLong {
                len: self.seq_len(),
                max: config.max_positions,
            });
        }
        for (&id, &m) in self.token_ids.iter().zip(&self.attention_mask) {
            if m && id as usize >= config.vocab_size {
                return Err(Error::IdOutOfRange {
                    id,
                    size: config.vocab_size,
                });
            }
        }
        for row in self.attention_mask.rows() {
            let len = row.iter().take_while(|&&m| m).count();
            if len == 0 {
                return Err(Error::ShapeMismatch("sequence with no unpadded position".into()));
            }
            if row.iter().skip(len).any(|&m| m) {
                return Err(Error::ShapeMismatch("attention mask is not right-padded".into()));
            }
        }
        match &self.targets {
            Targets::Classes(c) if c.len() != self.batch_size() => Err(Error::ShapeMismatch(
                format!("{} class targets for {} sequences", c.len(), self.batch_size()),
            )),
            Targets::Mlm { targets, loss_mask }
                if targets.dim() != self.token_ids.dim() || loss_mask.dim() != self.token_ids.dim() =>
            {
                Err(Error::ShapeMismatch("MLM targets differ from token ids".into()))
            }
            Targets::Mlm { loss_mask, .. } if loss_mask.iter().zip(&self.attention_mask).any(|(&l, &m)| l && !m) => {
                Err(Error::ShapeMismatch("MLM loss mask covers a padded position".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Dropout is active only in training mode; masks are derived from `seed`
/// so a forward pass can be replayed exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    Train { seed: u64 },
}

#[derive(Debug, Clone)]
struct NormCache {
    normalized: Array2<f64>,
    inv_std: Array1<f64>,
}

/// Rows `start..start + len` of the stacked token matrix hold one sequence.
#[derive(Debug, Clone, Copy)]
struct Span {
    start: usize,
    len: usize,
}

impl Span {
    fn rows(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }
}

/// Intermediates of one block over the stacked unpadded tokens of a batch.
#[derive(Debug, Clone)]
struct BlockCache {
    input: Array2<f64>,
    query: Array2<f64>,
    key: Array2<f64>,
    value: Array2<f64>,
    /// Attention probabilities per sequence and head, `len × len`.
    probs: Vec<Vec<Array2<f64>>>,
    context: Array2<f64>,
    attention_dropout: Option<Array2<f64>>,
    attention_norm: NormCache,
    mid: Array2<f64>,
    ffn_pre: Array2<f64>,
    ffn_act: Array2<f64>,
    ffn_dropout: Option<Array2<f64>>,
    ffn_norm: NormCache,
    output: Array2<f64>,
}

/// Forward intermediates for a batch. Only unpadded positions are computed;
/// their rows are stacked so the dense layers run as one product.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    spans: Vec<Span>,
    token_ids: Vec<u32>,
    embedding_norm: NormCache,
    embedding_dropout: Option<Array2<f64>>,
    blocks: Vec<BlockCache>,
    seq_len: usize,
    hidden_size: usize,
}

impl ForwardPass {
    pub fn batch_size(&self) -> usize {
        self.spans.len()
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn num_layers(&self) -> usize {
        self.blocks.len()
    }

    /// Unpadded length of sequence `b`.
    pub fn len_of(&self, b: usize) -> usize {
        self.spans[b].len
    }

    /// Output of block `layer` (1-based) for the unpadded positions of sequence `b`.
    pub fn block_output(&self, b: usize, layer: usize) -> ArrayView2<'_, f64> {
        self.blocks[layer - 1].output.slice(s![self.spans[b].rows(), ..])
    }

    /// Every block's output as `B × T × H`, ordered from block 1 to block L.
    /// Padded positions are zero.
    pub fn hidden_states(&self) -> Vec<Array3<f64>> {
        (1..=self.num_layers())
            .map(|layer| {
                let mut out = Array3::zeros((self.batch_size(), self.seq_len, self.hidden_size));
                for b in 0..self.batch_size() {
                    out.slice_mut(s![b, ..self.len_of(b), ..]).assign(&self.block_output(b, layer));
                }
                out
            })
            .collect()
    }

    /// Attention probabilities of `head` in block `layer` for sequence `b`.
    pub fn attention_probs(&self, b: usize, layer: usize, head: usize) -> ArrayView2<'_, f64> {
        self.blocks[layer - 1].probs[b][head].view()
    }
}

/// Upstream gradients on block outputs: entry `l - 1` is `B × T × H` or `None`.
pub type BlockUpstream = Vec<Option<Array3<f64>>>;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn linear(x: &Array2<f64>, p: &Linear) -> Array2<f64> {
    x.dot(&p.weight) + &p.bias
}

fn linear_backward(x: &Array2<f64>, dy: &Array2<f64>, p: &Linear, grad: &mut Linear) -> Array2<f64> {
    grad.weight += &x.t().dot(dy);
    grad.bias += &dy.sum_axis(Axis(0));
    dy.dot(&p.weight.t())
}

fn layer_norm(x: &Array2<f64>, p: &LayerNormParams) -> (Array2<f64>, NormCache) {
    let width = x.ncols() as f64;
    let mut normalized = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, inv) in normalized.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / width;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / width;
        *inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        let scale = *inv;
        row.mapv_inplace(|v| v * scale);
    }
    let out = &normalized * &p.gamma + &p.beta;
    (out, NormCache { normalized, inv_std })
}

fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &NormCache,
    p: &LayerNormParams,
    grad: &mut LayerNormParams,
) -> Array2<f64> {
    grad.gamma += &(dy * &cache.normalized).sum_axis(Axis(0));
    grad.beta += &dy.sum_axis(Axis(0));
    let width = dy.ncols() as f64;
    let dxhat = dy * &p.gamma;
    let mut dx = Array2::zeros(dy.raw_dim());
    for t in 0..dy.nrows() {
        let dxh = dxhat.row(t);
        let xh = cache.normalized.row(t);
        let mean_d = dxh.sum() / width;
        let mean_dx = dxh.dot(&xh) / width;
        let inv = cache.inv_std[t];
        Zip::from(dx.row_mut(t))
            .and(&dxh)
            .and(&xh)
            .for_each(|o, &d, &x| *o = inv * (d - mean_d - x * mean_dx));
    }
    dx
}

/// Inverted-dropout mask; each sequence's rows come from its own stream.
fn dropout_mask(rngs: &mut [ChaCha8Rng], spans: &[Span], cols: usize, rate: f64) -> Array2<f64> {
    let keep = 1.0 / (1.0 - rate);
    let rows = spans.last().map_or(0, |s| s.start + s.len);
    let mut mask = Array2::zeros((rows, cols));
    for (rng, span) in rngs.iter_mut().zip(spans) {
        for v in mask.slice_mut(s![span.rows(), ..]).iter_mut() {
            *v = if rng.random::<f64>() < rate { 0.0 } else { keep };
        }
    }
    mask
}

fn forward_block(
    p: &BlockParams,
    config: &EncoderConfig,
    input: Array2<f64>,
    spans: &[Span],
    mut rngs: Option<&mut Vec<ChaCha8Rng>>,
) -> BlockCache {
    let d = config.head_dim();
    let scale = 1.0 / (d as f64).sqrt();
    let query = linear(&input, &p.query);
    let key = linear(&input, &p.key);
    let value = linear(&input, &p.value);
    let mut context = Array2::zeros(input.raw_dim());
    let mut probs = Vec::with_capacity(spans.len());
    for span in spans {
        let mut per_head = Vec::with_capacity(config.num_heads);
        for h in 0..config.num_heads {
            let block = s![span.rows(), h * d..(h + 1) * d];
            let mut scores = query.slice(block).dot(&key.slice(block).t()) * scale;
            for mut row in scores.rows_mut() {
                let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                row.mapv_inplace(|v| (v - max).exp());
                let sum = row.sum();
                row.mapv_inplace(|v| v / sum);
            }
            context.slice_mut(block).assign(&scores.dot(&value.slice(block)));
            per_head.push(scores);
        }
        probs.push(per_head);
    }
    let rate = config.dropout_rate;
    let mut attn_out = linear(&context, &p.output);
    let attention_dropout = rngs.as_deref_mut().filter(|_| rate > 0.0).map(|rngs| {
        let mask = dropout_mask(rngs, spans, config.hidden_size, rate);
        attn_out *= &mask;
        mask
    });
    let (mid, attention_norm) = layer_norm(&(&input + &attn_out), &p.attention_norm);
    let ffn_pre = linear(&mid, &p.ffn_in);
    let ffn_act = ffn_pre.mapv(gelu);
    let mut ffn_out = linear(&ffn_act, &p.ffn_out);
    let ffn_dropout = rngs.filter(|_| rate > 0.0).map(|rngs| {
        let mask = dropout_mask(rngs, spans, config.hidden_size, rate);
        ffn_out *= &mask;
        mask
    });
    let (output, ffn_norm) = layer_norm(&(&mid + &ffn_out), &p.ffn_norm);
    BlockCache {
        input,
        query,
        key,
        value,
        probs,
        context,
        attention_dropout,
        attention_norm,
        mid,
        ffn_pre,
        ffn_act,
        ffn_dropout,
        ffn_norm,
        output,
    }
}

/// Run the encoder and keep every block's output plus the intermediates
/// needed by [`backward`].
pub fn forward(
    params: &ModelParameters,
    config: &EncoderConfig,
    batch: &Batch,
    mode: Mode,
) -> Result<ForwardPass> {
    batch.validate(config)?;
    if params.blocks.len() != config.num_layers {
        return Err(Error::ShapeMismatch("parameter blocks differ from config".into()));
    }
    // only the unpadded prefix is computed, so padded slots cannot leak
    let mut spans = Vec::with_capacity(batch.batch_size());
    let mut token_ids = Vec::new();
    for b in 0..batch.batch_size() {
        let ids = batch.sequence(b);
        spans.push(Span {
            start: token_ids.len(),
            len: ids.len(),
        });
        token_ids.extend(ids);
    }
    let mut embedded = Array2::zeros((token_ids.len(), config.hidden_size));
    for span in &spans {
        for (t, row_index) in span.rows().enumerate() {
            let mut row = embedded.row_mut(row_index);
            row.assign(&params.token_embedding.row(token_ids[row_index] as usize));
            row += &params.position_embedding.row(t);
        }
    }
    let mut rngs = match mode {
        Mode::Train { seed } => Some(
            (0..spans.len())
                .map(|b| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(b as u64);
                    rng
                })
                .collect::<Vec<_>>(),
        ),
        Mode::Eval => None,
    };
    let (mut hidden, embedding_norm) = layer_norm(&embedded, &params.embedding_norm);
    let embedding_dropout = rngs.as_mut().filter(|_| config.dropout_rate > 0.0).map(|rngs| {
        let mask = dropout_mask(rngs, &spans, config.hidden_size, config.dropout_rate);
        hidden *= &mask;
        mask
    });
    let mut blocks = Vec::with_capacity(params.blocks.len());
    for block in &params.blocks {
        let cache = forward_block(block, config, hidden, &spans, rngs.as_mut());
        hidden = cache.output.clone();
        blocks.push(cache);
    }
    Ok(ForwardPass {
        spans,
        token_ids,
        embedding_norm,
        embedding_dropout,
        blocks,
        seq_len: batch.seq_len(),
        hidden_size: config.hidden_size,
    })
}

fn backward_block(
    p: &BlockParams,
    config: &EncoderConfig,
    cache: &BlockCache,
    spans: &[Span],
    d_output: Array2<f64>,
    grad: &mut BlockParams,
) -> Array2<f64> {
    let d = config.head_dim();
    let scale = 1.0 / (d as f64).sqrt();

    let d_resid2 = layer_norm_backward(&d_output, &cache.ffn_norm, &p.ffn_norm, &mut grad.ffn_norm);
    let mut d_mid = d_resid2.clone();
    let d_ffn_out = match &cache.ffn_dropout {
        Some(mask) => d_resid2 * mask,
        None => d_resid2,
    };
    let d_act = linear_backward(&cache.ffn_act, &d_ffn_out, &p.ffn_out, &mut grad.ffn_out);
    let d_pre = d_act * &cache.ffn_pre.mapv(gelu_grad);
    d_mid += &linear_backward(&cache.mid, &d_pre, &p.ffn_in, &mut grad.ffn_in);

    let d_resid1 = layer_norm_backward(&d_mid, &cache.attention_norm, &p.attention_norm, &mut grad.attention_norm);
    let mut d_input = d_resid1.clone();
    let d_attn_out = match &cache.attention_dropout {
        Some(mask) => d_resid1 * mask,
        None => d_resid1,
    };
    let d_context = linear_backward(&cache.context, &d_attn_out, &p.output, &mut grad.output);

    let mut d_query = Array2::zeros(cache.query.raw_dim());
    let mut d_key = Array2::zeros(cache.key.raw_dim());
    let mut d_value = Array2::zeros(cache.value.raw_dim());
    for (span, per_head) in spans.iter().zip(&cache.probs) {
        for (h, probs) in per_head.iter().enumerate() {
            let block = s![span.rows(), h * d..(h + 1) * d];
            let d_ctx = d_context.slice(block);
            let mut d_scores = d_ctx.dot(&cache.value.slice(block).t());
            d_value.slice_mut(block).assign(&probs.t().dot(&d_ctx));
            for (mut ds_row, p_row) in d_scores.rows_mut().into_iter().zip(probs.rows()) {
                let inner = ds_row.dot(&p_row);
                Zip::from(&mut ds_row).and(&p_row).for_each(|ds, &pv| *ds = pv * (*ds - inner) * scale);
            }
            d_query.slice_mut(block).assign(&d_scores.dot(&cache.key.slice(block)));
            d_key.slice_mut(block).assign(&d_scores.t().dot(&cache.query.slice(block)));
        }
    }
    d_input += &linear_backward(&cache.input, &d_query, &p.query, &mut grad.query);
    d_input += &linear_backward(&cache.input, &d_key, &p.key, &mut grad.key);
    d_input += &linear_backward(&cache.input, &d_value, &p.value, &mut grad.value);
    d_input
}

/// Exact gradients of a scalar loss whose derivative with respect to the
/// selected block outputs is `upstream`. Head gradients are left at zero;
/// the objectives fill them in.
pub fn backward(
    params: &ModelParameters,
    config: &EncoderConfig,
    pass: &ForwardPass,
    upstream: &BlockUpstream,
) -> Result<ModelParameters> {
    if upstream.len() != config.num_layers || pass.num_layers() != config.num_layers {
        return Err(Error::ShapeMismatch(format!(
            "{} upstream entries for {} blocks",
            upstream.len(),
            config.num_layers
        )));
    }
    let expected = (pass.batch_size(), pass.seq_len(), config.hidden_size);
    for g in upstream.iter().flatten() {
        if g.dim() != expected {
            return Err(Error::ShapeMismatch(format!(
                "upstream gradient {:?}, expected {expected:?}",
                g.dim()
            )));
        }
    }
    let mut grads = params.zeros_like();
    let mut d_hidden: Array2<f64> = Array2::zeros((pass.token_ids.len(), config.hidden_size));
    for (l, block) in pass.blocks.iter().enumerate().rev() {
        if let Some(g) = &upstream[l] {
            for (b, span) in pass.spans.iter().enumerate() {
                let mut rows = d_hidden.slice_mut(s![span.rows(), ..]);
                rows += &g.slice(s![b, ..span.len, ..]);
            }
        }
        d_hidden = backward_block(&params.blocks[l], config, block, &pass.spans, d_hidden, &mut grads.blocks[l]);
    }
    if let Some(mask) = &pass.embedding_dropout {
        d_hidden *= mask;
    }
    let d_embedded = layer_norm_backward(&d_hidden, &pass.embedding_norm, &params.embedding_norm, &mut grads.embedding_norm);
    for span in &pass.spans {
        for (t, row_index) in span.rows().enumerate() {
            let row = d_embedded.row(row_index);
            let mut tok = grads.token_embedding.row_mut(pass.token_ids[row_index] as usize);
            tok += &row;
            let mut pos = grads.position_embedding.row_mut(t);
            pos += &row;
        }
    }
    Ok(grads)
}

#[cfg(test)]
pub(crate) fn layer_norm_for_test(x: &Array2<f64>, p: &LayerNormParams) -> (Array2<f64>, Array2<f64>) {
    let (out, cache) = layer_norm(x, p);
    (out, cache.normalized)
}
