use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::Label;

/// `k` disjoint validation folds covering every index once, each sorted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub k: usize,
    pub folds: Vec<Vec<usize>>,
}

impl FoldSplit {
    pub fn validation(&self, fold: usize) -> &[usize] {
        &self.folds[fold]
    }

    /// Every index outside `fold`, ascending.
    pub fn training(&self, fold: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = self
            .folds
            .iter()
            .enumerate()
            .filter(|&(f, _)| f != fold)
            .flat_map(|(_, v)| v.iter().copied())
            .collect();
        idx.sort_unstable();
        idx
    }
}

/// Shuffle each class with a seeded RNG and deal it round-robin over the
/// folds. The dealing offset carries over between classes so fold sizes stay
/// balanced too.
pub fn stratified_kfold(labels: &[Label], k: usize, seed: u64) -> Result<FoldSplit> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if labels.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut folds = vec![Vec::new(); k];
    let mut offset = 0;
    for class in Label::ALL {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.is_empty() {
            continue;
        }
        if members.len() < k {
            return Err(Error::ClassTooSmall {
                label: class.to_string(),
                count: members.len(),
                k,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(class.index() as u64);
        members.shuffle(&mut rng);
        for (i, idx) in members.iter().enumerate() {
            folds[(offset + i) % k].push(*idx);
        }
        offset += members.len();
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(FoldSplit { k, folds })
}
