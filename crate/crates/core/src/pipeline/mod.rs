//! The two-stage adaptation procedure: domain masked-LM tuning and
//! augmentation, then classifier fine-tuning under stratified k-fold with
//! macro-F1 evaluation.

mod augment;
mod folds;
mod masking;
mod metrics;
mod mlm;
mod synth;
mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::label::Label;
use crate::preprocess::CleanDocument;
use crate::tokenizer::{Vocabulary, NUM_SPECIALS};

pub use augment::{augment, augment_corpus, AugmentSpec};
pub use folds::{stratified_kfold, FoldSplit};
pub use masking::{mask_batch, MaskingSpec};
pub use metrics::{evaluate, evaluate_names, ClassMetrics, EvalReport, FoldMetrics, FoldReport};
pub use mlm::{tune_mlm, MlmOutcome, MlmTuning};
pub use synth::{generate_synthetic_corpus, ClassSizes};
pub use train::{
    fine_tune_plan, predict_labels, run_kfold, train_classifier, train_until, BestEpoch, EpochRecord, FineTuneSpec,
    KFoldOutcome, KFoldRun, TrainEvent, TrainState,
};

/// One encoded, labeled example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub ids: Vec<u32>,
    pub label: Label,
}

/// Whether a token may be masked, replaced or rewritten: any non-special id.
pub fn is_maskable(id: u32) -> bool {
    id as usize >= NUM_SPECIALS
}

/// Encode the labeled documents; unlabeled ones are dropped.
pub fn encode_samples(docs: &[CleanDocument], vocab: &Vocabulary, max_len: usize) -> Vec<Sample> {
    docs.iter()
        .filter_map(|d| {
            d.label.map(|label| Sample {
                ids: vocab.encode(d, max_len),
                label,
            })
        })
        .collect()
}

/// An independent seed for `stream` derived from `seed`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.random()
}
