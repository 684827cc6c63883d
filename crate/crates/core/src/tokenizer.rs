//! Character-level byte-pair-merge vocabulary with RoBERTa-style special tokens.
//!
//! Words are split into characters and the final character carries the
//! end-of-word marker `</w>`, so merged symbols never straddle a word
//! boundary and decoding can restore the original word sequence.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::{CleanDocument, EMAIL_TOKEN, EMOJI_TOKEN, PHONE_TOKEN};

pub const BOS: &str = "<s>";
pub const PAD: &str = "<pad>";
pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";
pub const MASK: &str = "<mask>";
pub const END_OF_WORD: &str = "</w>";

/// Special tokens in id order; they occupy ids `0..SPECIALS.len()`.
pub const SPECIALS: [&str; 8] = [BOS, PAD, EOS, UNK, MASK, EMOJI_TOKEN, EMAIL_TOKEN, PHONE_TOKEN];

pub const BOS_ID: u32 = 0;
pub const PAD_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const UNK_ID: u32 = 3;
pub const MASK_ID: u32 = 4;
pub const NUM_SPECIALS: usize = SPECIALS.len();

/// Whole-word specials that pass through encoding and decoding as surface tokens.
fn word_special(word: &str) -> Option<u32> {
    SPECIALS[UNK_ID as usize..]
        .iter()
        .position(|s| *s == word)
        .map(|p| p as u32 + UNK_ID)
}

fn split_word(word: &str) -> Vec<String> {
    let mut symbols: Vec<String> = word.chars().map(String::from).collect();
    if let Some(last) = symbols.last_mut() {
        last.push_str(END_OF_WORD);
    }
    symbols
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct VocabFile {
    specials: BTreeMap<String, u32>,
    merges: Vec<[String; 2]>,
    tokens: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    merges: Vec<(String, String)>,
    merge_rank: HashMap<(String, String), usize>,
    tokens: Vec<String>,
    token_to_id: HashMap<String, u32>,
}

impl Vocabulary {
    fn from_parts(merges: Vec<(String, String)>, tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < NUM_SPECIALS || tokens[..NUM_SPECIALS] != SPECIALS {
            return Err(Error::InvalidArgument(
                "vocabulary must start with the special tokens in canonical order".into(),
            ));
        }
        let merge_rank = merges
            .iter()
            .enumerate()
            .map(|(rank, pair)| (pair.clone(), rank))
            .collect();
        let token_to_id: HashMap<String, u32> = tokens
            .iter()
            .enumerate()
            .map(|(id, t)| (t.clone(), id as u32))
            .collect();
        if token_to_id.len() != tokens.len() {
            return Err(Error::InvalidArgument("duplicate vocabulary entries".into()));
        }
        Ok(Vocabulary {
            merges,
            merge_rank,
            tokens,
            token_to_id,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Structural tokens that never take part in masking or augmentation.
    pub fn is_control(id: u32) -> bool {
        matches!(id, BOS_ID | PAD_ID | EOS_ID | UNK_ID | MASK_ID)
    }

    /// Apply merges to a single word, lowest rank first.
    fn word_symbols(&self, word: &str) -> Vec<String> {
        let mut symbols = split_word(word);
        loop {
            let best = symbols
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| {
                    self.merge_rank
                        .get(&(w[0].clone(), w[1].clone()))
                        .map(|&rank| (rank, i))
                })
                .min();
            let Some((rank, _)) = best else { break };
            let (left, right) = &self.merges[rank];
            let mut merged = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && &symbols[i] == left && &symbols[i + 1] == right {
                    merged.push(format!("{left}{right}"));
                    i += 2;
                } else {
                    merged.push(std::mem::take(&mut symbols[i]));
                    i += 1;
                }
            }
            symbols = merged;
        }
        symbols
    }

    /// Subword ids for a token sequence, without `<s>`/`</s>`.
    pub fn subword_ids(&self, tokens: &[String]) -> Vec<u32> {
        let mut ids = Vec::new();
        for word in tokens {
            if let Some(id) = word_special(word) {
                ids.push(id);
                continue;
            }
            ids.extend(
                self.word_symbols(word)
                    .iter()
                    .map(|s| self.id(s).unwrap_or(UNK_ID)),
            );
        }
        ids
    }

    /// `<s>` + subwords + `</s>`, truncated to `max_len` with `</s>` kept last.
    pub fn encode(&self, doc: &CleanDocument, max_len: usize) -> Vec<u32> {
        assert!(max_len >= 2, "max_len must leave room for <s> and </s>");
        let mut ids = Vec::with_capacity(max_len);
        ids.push(BOS_ID);
        let subwords = self.subword_ids(&doc.tokens);
        ids.extend(subwords.into_iter().take(max_len - 2));
        ids.push(EOS_ID);
        ids
    }

    /// Surface tokens for an id sequence. `<s>`, `</s>` and `<pad>` are dropped;
    /// `<mask>`, `<unk>` and the placeholders decode to their literal text.
    pub fn decode(&self, ids: &[u32]) -> Result<Vec<String>> {
        let mut words = Vec::new();
        let mut current = String::new();
        for &id in ids {
            let token = self.token(id).ok_or(Error::IdOutOfRange {
                id,
                size: self.len(),
            })?;
            if matches!(id, BOS_ID | EOS_ID | PAD_ID) {
                continue;
            }
            if (id as usize) < NUM_SPECIALS {
                if !current.is_empty() {
                    words.push(std::mem::take(&mut current));
                }
                words.push(token.to_string());
            } else if let Some(stem) = token.strip_suffix(END_OF_WORD) {
                current.push_str(stem);
                words.push(std::mem::take(&mut current));
            } else {
                current.push_str(token);
            }
        }
        if !current.is_empty() {
            words.push(current);
        }
        Ok(words)
    }

    pub fn to_json(&self) -> Result<String> {
        let file = VocabFile {
            specials: SPECIALS
                .iter()
                .enumerate()
                .map(|(id, s)| (s.to_string(), id as u32))
                .collect(),
            merges: self
                .merges
                .iter()
                .map(|(a, b)| [a.clone(), b.clone()])
                .collect(),
            tokens: self.tokens.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let file: VocabFile = serde_json::from_str(json)?;
        for (name, &id) in &file.specials {
            if SPECIALS.get(id as usize) != Some(&name.as_str()) {
                return Err(Error::InvalidArgument(format!(
                    "special token {name:?} has unexpected id {id}"
                )));
            }
        }
        let merges = file.merges.into_iter().map(|[a, b]| (a, b)).collect();
        Self::from_parts(merges, file.tokens)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Learn a merge vocabulary of at most `target_size` entries.
///
/// Pair-frequency ties break towards the lexicographically smallest pair, so
/// the result depends only on the corpus contents and order.
pub fn build_vocab(corpus: &[CleanDocument], target_size: usize) -> Result<Vocabulary> {
    let mut word_counts: BTreeMap<&str, usize> = BTreeMap::new();
    for doc in corpus {
        for word in &doc.tokens {
            if word_special(word).is_none() {
                *word_counts.entry(word.as_str()).or_default() += 1;
            }
        }
    }
    if word_counts.is_empty() {
        return Err(Error::EmptyCorpus);
    }

    let mut words: Vec<(Vec<String>, usize)> = word_counts
        .into_iter()
        .map(|(w, c)| (split_word(w), c))
        .collect();

    let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    let alphabet: std::collections::BTreeSet<&String> =
        words.iter().flat_map(|(symbols, _)| symbols.iter()).collect();
    let required = NUM_SPECIALS + alphabet.len();
    if target_size < required {
        return Err(Error::VocabTooSmall {
            target: target_size,
            required,
        });
    }
    tokens.extend(alphabet.into_iter().cloned());
    let mut known: std::collections::HashSet<String> = tokens.iter().cloned().collect();

    let mut merges = Vec::new();
    while tokens.len() < target_size {
        let mut pair_counts: HashMap<(&str, &str), usize> = HashMap::new();
        for (symbols, count) in &words {
            for w in symbols.windows(2) {
                *pair_counts.entry((&w[0], &w[1])).or_default() += count;
            }
        }
        let Some(((left, right), _)) = pair_counts
            .into_iter()
            .min_by(|(pa, ca), (pb, cb)| cb.cmp(ca).then_with(|| pa.cmp(pb)))
        else {
            break;
        };
        let (left, right) = (left.to_string(), right.to_string());
        let joined = format!("{left}{right}");
        for (symbols, _) in &mut words {
            if symbols.len() < 2 {
                continue;
            }
            let mut merged = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
                    merged.push(joined.clone());
                    i += 2;
                } else {
                    merged.push(std::mem::take(&mut symbols[i]));
                    i += 1;
                }
            }
            *symbols = merged;
        }
        if known.insert(joined.clone()) {
            tokens.push(joined);
        }
        merges.push((left, right));
    }
    Vocabulary::from_parts(merges, tokens)
}
