//! A small post-LayerNorm transformer encoder with hand-written gradients.
//!
//! Every block's hidden states are exposed so that heads can fuse features
//! from several depths. All arithmetic is `f64`; checkpoints store `f32`.

mod checkpoint;
mod model;
mod params;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::objectives::FusionSpec;

pub use checkpoint::{write_atomic, Checkpoint, NamedTensor, MAGIC};
pub use model::{backward, forward, Batch, BlockUpstream, ForwardPass, Mode, Targets};
pub use params::{init_parameters, BlockParams, LayerNormParams, Linear, ModelParameters};

pub const LAYER_NORM_EPS: f64 = 1e-12;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub ffn_size: usize,
    pub max_positions: usize,
    pub vocab_size: usize,
    pub dropout_rate: f64,
    pub num_classes: usize,
    /// Share the MLM output projection with the token embeddings.
    pub tie_mlm_head: bool,
    /// Block features feeding the classification head.
    pub fusion: FusionSpec,
}

impl EncoderConfig {
    /// Desk-scale defaults: 4 blocks of width 64.
    pub fn desk(vocab_size: usize) -> Self {
        EncoderConfig {
            num_layers: 4,
            hidden_size: 64,
            num_heads: 4,
            ffn_size: 256,
            max_positions: 64,
            vocab_size,
            dropout_rate: 0.1,
            num_classes: 3,
            tie_mlm_head: true,
            fusion: FusionSpec::last_blocks(4, 2),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }

    pub fn classifier_input_dim(&self) -> usize {
        self.fusion.output_dim(self.hidden_size)
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.num_layers == 0 {
            problems.push("num_layers must be >= 1".to_string());
        }
        if self.num_heads == 0 || self.hidden_size % self.num_heads != 0 {
            problems.push(format!(
                "hidden_size {} must be divisible by num_heads {}",
                self.hidden_size, self.num_heads
            ));
        }
        if self.ffn_size == 0 || self.max_positions < 2 || self.vocab_size == 0 {
            problems.push("ffn_size, vocab_size must be positive and max_positions >= 2".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            problems.push(format!("dropout_rate {} not in [0,1)", self.dropout_rate));
        }
        if self.num_classes < 2 {
            problems.push("num_classes must be >= 2".into());
        }
        if let Err(e) = self.fusion.validate(self.num_layers) {
            problems.push(e.to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems.join("; ")))
        }
    }
}

/// Which weight-decay group a tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayGroup {
    Decayable,
    NoDecay,
}

/// Depth of a tensor in the network; blocks are numbered from 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Depth {
    Embedding,
    Block(usize),
    Head,
}

impl Depth {
    pub fn all(num_layers: usize) -> Vec<Depth> {
        std::iter::once(Depth::Embedding)
            .chain((1..=num_layers).map(Depth::Block))
            .chain(std::iter::once(Depth::Head))
            .collect()
    }
}

impl fmt::Display for Depth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Depth::Embedding => f.write_str("embedding"),
            Depth::Block(l) => write!(f, "block_{l}"),
            Depth::Head => f.write_str("head"),
        }
    }
}

impl FromStr for Depth {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "embedding" => Ok(Depth::Embedding),
            "head" => Ok(Depth::Head),
            other => other
                .strip_prefix("block_")
                .and_then(|n| n.parse().ok())
                .filter(|&n: &usize| n >= 1)
                .map(Depth::Block)
                .ok_or_else(|| Error::InvalidArgument(format!("bad depth tag {other:?}"))),
        }
    }
}

impl Serialize for Depth {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Depth {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: DecayGroup,
    pub depth: Depth,
}
