use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{DecayGroup, Depth, EncoderConfig, ParamInfo, INIT_STD};

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `in × out`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    fn zeros(input: usize, output: usize) -> Self {
        Linear {
            weight: Array2::zeros((input, output)),
            bias: Array1::zeros(output),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

impl LayerNormParams {
    fn identity(width: usize) -> Self {
        LayerNormParams {
            gamma: Array1::ones(width),
            beta: Array1::zeros(width),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub attention_norm: LayerNormParams,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub ffn_norm: LayerNormParams,
}

impl BlockParams {
    fn zeros(hidden: usize, ffn: usize) -> Self {
        BlockParams {
            query: Linear::zeros(hidden, hidden),
            key: Linear::zeros(hidden, hidden),
            value: Linear::zeros(hidden, hidden),
            output: Linear::zeros(hidden, hidden),
            attention_norm: LayerNormParams::identity(hidden),
            ffn_in: Linear::zeros(hidden, ffn),
            ffn_out: Linear::zeros(ffn, hidden),
            ffn_norm: LayerNormParams::identity(hidden),
        }
    }
}

/// All trainable arrays. Gradients and optimizer moments reuse this layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    /// `V × H`
    pub token_embedding: Array2<f64>,
    /// `max_positions × H`
    pub position_embedding: Array2<f64>,
    pub embedding_norm: LayerNormParams,
    pub blocks: Vec<BlockParams>,
    /// Untied MLM projection (`H × V`); `None` when tied to the token embeddings.
    pub mlm_weight: Option<Array2<f64>>,
    pub mlm_bias: Array1<f64>,
    /// `D × K`
    pub classifier: Linear,
}

impl ModelParameters {
    /// Zero-filled arrays shaped like `config`, LayerNorm scales included.
    pub fn zeros(config: &EncoderConfig) -> Self {
        let h = config.hidden_size;
        let mut params = ModelParameters {
            token_embedding: Array2::zeros((config.vocab_size, h)),
            position_embedding: Array2::zeros((config.max_positions, h)),
            embedding_norm: LayerNormParams::identity(h),
            blocks: (0..config.num_layers)
                .map(|_| BlockParams::zeros(h, config.ffn_size))
                .collect(),
            mlm_weight: (!config.tie_mlm_head).then(|| Array2::zeros((h, config.vocab_size))),
            mlm_bias: Array1::zeros(config.vocab_size),
            classifier: Linear::zeros(config.classifier_input_dim(), config.num_classes),
        };
        params.fill(0.0);
        params
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.fill(0.0);
        out
    }

    pub fn fill(&mut self, value: f64) {
        for (_, data) in self.tensors_mut() {
            data.fill(value);
        }
    }

    /// Tensors in canonical order with their group and depth tags.
    pub fn tensors(&self) -> Vec<(ParamInfo, &[f64])> {
        self.infos().into_iter().zip(self.slices()).collect()
    }

    pub fn infos(&self) -> Vec<ParamInfo> {
        self.layout(|name, group, depth, shape| ParamInfo {
            name,
            shape: shape.to_vec(),
            group,
            depth,
        })
    }

    pub fn tensors_mut(&mut self) -> Vec<(ParamInfo, &mut [f64])> {
        self.infos()
            .into_iter().zip(self.slices_mut()).collect()
    }

    fn layout<T>(&self, mut make: impl FnMut(String, DecayGroup, Depth, &[usize]) -> T) -> Vec<T> {
        use DecayGroup::{Decayable, NoDecay};
        let mut out = Vec::new();
        out.push(make("embeddings.token".into(), Decayable, Depth::Embedding, self.token_embedding.shape()));
        out.push(make("embeddings.position".into(), Decayable, Depth::Embedding, self.position_embedding.shape()));
        out.push(make("embeddings.norm.gamma".into(), NoDecay, Depth::Embedding, self.embedding_norm.gamma.shape()));
        out.push(make("embeddings.norm.beta".into(), NoDecay, Depth::Embedding, self.embedding_norm.beta.shape()));
        for (i, block) in self.blocks.iter().enumerate() {
            let depth = Depth::Block(i + 1);
            let p = format!("blocks.{}", i + 1);
            for (part, linear) in block.linears() {
                out.push(make(format!("{p}.{part}.weight"), Decayable, depth, linear.weight.shape()));
                out.push(make(format!("{p}.{part}.bias"), NoDecay, depth, linear.bias.shape()));
            }
            for (part, norm) in [("attention.norm", &block.attention_norm), ("ffn.norm", &block.ffn_norm)] {
                out.push(make(format!("{p}.{part}.gamma"), NoDecay, depth, norm.gamma.shape()));
                out.push(make(format!("{p}.{part}.beta"), NoDecay, depth, norm.beta.shape()));
            }
        }
        if let Some(w) = &self.mlm_weight {
            out.push(make("mlm.weight".into(), Decayable, Depth::Head, w.shape()));
        }
        out.push(make("mlm.bias".into(), NoDecay, Depth::Head, self.mlm_bias.shape()));
        out.push(make("classifier.weight".into(), Decayable, Depth::Head, self.classifier.weight.shape()));
        out.push(make("classifier.bias".into(), NoDecay, Depth::Head, self.classifier.bias.shape()));
        out
    }

    fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![
            self.token_embedding.as_slice().unwrap(),
            self.position_embedding.as_slice().unwrap(),
            self.embedding_norm.gamma.as_slice().unwrap(),
            self.embedding_norm.beta.as_slice().unwrap(),
        ];
        for block in &self.blocks {
            for (_, linear) in block.linears() {
                out.push(linear.weight.as_slice().unwrap());
                out.push(linear.bias.as_slice().unwrap());
            }
            for norm in [&block.attention_norm, &block.ffn_norm] {
                out.push(norm.gamma.as_slice().unwrap());
                out.push(norm.beta.as_slice().unwrap());
            }
        }
        if let Some(w) = &self.mlm_weight {
            out.push(w.as_slice().unwrap());
        }
        out.push(self.mlm_bias.as_slice().unwrap());
        out.push(self.classifier.weight.as_slice().unwrap());
        out.push(self.classifier.bias.as_slice().unwrap());
        out
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![
            self.token_embedding.as_slice_mut().unwrap(),
            self.position_embedding.as_slice_mut().unwrap(),
            self.embedding_norm.gamma.as_slice_mut().unwrap(),
            self.embedding_norm.beta.as_slice_mut().unwrap(),
        ];
        for block in &mut self.blocks {
            let BlockParams {
                query,
                key,
                value,
                output,
                attention_norm,
                ffn_in,
                ffn_out,
                ffn_norm,
            } = block;
            for linear in [query, key, value, output, ffn_in, ffn_out] {
                out.push(linear.weight.as_slice_mut().unwrap());
                out.push(linear.bias.as_slice_mut().unwrap());
            }
            for norm in [attention_norm, ffn_norm] {
                out.push(norm.gamma.as_slice_mut().unwrap());
                out.push(norm.beta.as_slice_mut().unwrap());
            }
        }
        if let Some(w) = &mut self.mlm_weight {
            out.push(w.as_slice_mut().unwrap());
        }
        out.push(self.mlm_bias.as_slice_mut().unwrap());
        out.push(self.classifier.weight.as_slice_mut().unwrap());
        out.push(self.classifier.bias.as_slice_mut().unwrap());
        out
    }

    pub fn num_values(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|x| x.is_finite()))
    }

    /// Round every value to the nearest `f32` so checkpoints are lossless.
    pub fn round_to_f32(&mut self) {
        for (_, data) in self.tensors_mut() {
            for x in data.iter_mut() {
                *x = *x as f32 as f64;
            }
        }
    }

    /// Element-wise `self += other`; layouts must match.
    pub fn add_assign(&mut self, other: &ModelParameters) {
        for ((_, dst), (_, src)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }

    pub fn same_layout(&self, other: &ModelParameters) -> bool {
        let a = self.tensors();
        let b = other.tensors();
        a.len() == b.len()
            && a.iter()
                .zip(&b)
                .all(|((ia, _), (ib, _))| ia.name == ib.name && ia.shape == ib.shape)
    }

    /// Replace the classification head with a freshly initialized one sized for `config`.
    pub fn reset_classifier(&mut self, config: &EncoderConfig, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).unwrap();
        let mut head = Linear::zeros(config.classifier_input_dim(), config.num_classes);
        head.weight.mapv_inplace(|_| normal.sample(&mut rng) as f32 as f64);
        self.classifier = head;
    }
}

impl BlockParams {
    pub(crate) fn linears(&self) -> [(&'static str, &Linear); 6] {
        [
            ("attention.query", &self.query),
            ("attention.key", &self.key),
            ("attention.value", &self.value),
            ("attention.output", &self.output),
            ("ffn.in", &self.ffn_in),
            ("ffn.out", &self.ffn_out),
        ]
    }
}

/// Weights ~ N(0, 0.02²), biases zero, LayerNorm scale one and shift zero.
/// Values are rounded to `f32` so a checkpoint stores them exactly.
pub fn init_parameters(config: &EncoderConfig, seed: u64) -> ModelParameters {
    let mut params = ModelParameters::zeros(config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).unwrap();
    for (info, data) in params.tensors_mut() {
        let is_norm = info.name.ends_with(".gamma") || info.name.ends_with(".beta");
        match (info.group, is_norm) {
            (_, true) if info.name.ends_with(".gamma") => data.fill(1.0),
            (DecayGroup::Decayable, false) => {
                for x in data.iter_mut() {
                    *x = normal.sample(&mut rng);
                }
            }
            _ => data.fill(0.0),
        }
    }
    params.round_to_f32();
    params
}
