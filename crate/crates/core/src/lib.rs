//! Adapting a small RoBERTa-style encoder to three-way hate-speech
//! classification: domain masked-LM tuning, then classifier fine-tuning with
//! multi-block feature fusion, layer freezing, block-wise learning rates,
//! warm-up scheduling and label smoothing.

pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod label;
pub mod objectives;
pub mod optim;
pub mod pipeline;
pub mod preprocess;
pub mod tokenizer;

pub use encoder::write_atomic;
pub use error::{Error, Result};
pub use label::Label;
