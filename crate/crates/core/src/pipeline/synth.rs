//! A labeled stand-in corpus for runs without real data.
//!
//! Pseudo-Vietnamese syllables are split into a shared background
//! vocabulary and topic clusters of near-synonyms. Offensive and hateful
//! documents draw mostly from their own clusters, but supports overlap:
//! hateful text often carries offensive words, and every class sometimes
//! borrows another class's cluster. Rare class markers, junk tokens, emoji,
//! phone numbers, email addresses, capitals and decomposed accents give the
//! preprocessor real work. A few labels disagree with their text, as with
//! human annotators: the text comes from a neighbouring class.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};
use crate::label::Label;
use crate::preprocess::RawDocument;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSizes {
    pub clean: usize,
    pub offensive: usize,
    pub hate: usize,
}

/// Class counts of the reference training data.
const REFERENCE: ClassSizes = ClassSizes {
    clean: 18_614,
    offensive: 1_022,
    hate: 709,
};

impl ClassSizes {
    /// About `total` documents in the reference class ratio.
    pub fn reference_ratio(total: usize) -> Self {
        let all = (REFERENCE.clean + REFERENCE.offensive + REFERENCE.hate) as f64;
        let scale = |n: usize| ((n as f64) * total as f64 / all).round() as usize;
        let offensive = scale(REFERENCE.offensive).max(1);
        let hate = scale(REFERENCE.hate).max(1);
        ClassSizes {
            clean: total.saturating_sub(offensive + hate).max(1),
            offensive,
            hate,
        }
    }

    pub fn get(&self, label: Label) -> usize {
        match label {
            Label::Clean => self.clean,
            Label::Offensive => self.offensive,
            Label::Hate => self.hate,
        }
    }

    pub fn total(&self) -> usize {
        self.clean + self.offensive + self.hate
    }
}

impl Default for ClassSizes {
    fn default() -> Self {
        ClassSizes::reference_ratio(5_000)
    }
}

const ONSETS: [&str; 22] = [
    "b", "c", "ch", "d", "đ", "g", "h", "k", "kh", "l", "m", "n", "ng", "nh", "ph", "qu", "r", "s", "t", "th", "tr", "v",
];
const NUCLEI: [&str; 20] = [
    "a", "à", "á", "ả", "ạ", "o", "ô", "ơ", "ó", "ồ", "e", "ê", "ế", "i", "í", "u", "ú", "ư", "ữ", "ậ",
];
const CODAS: [&str; 7] = ["", "n", "ng", "t", "c", "m", "nh"];

const BACKGROUND: usize = 300;
const CLUSTERS_PER_CLASS: usize = 4;
const CLUSTER_SIZE: usize = 8;

/// Share of documents whose text comes from a neighbouring class.
const ANNOTATION_NOISE: f64 = 0.06;

const EMOJI: [[&str; 3]; 3] = [["😀", "🌸", "👍"], ["😂", "🙄", "😡"], ["😡", "🤬", "👿"]];

struct Lexicon {
    background: Vec<String>,
    /// `clusters[class][i]` holds near-synonyms.
    clusters: Vec<Vec<Vec<String>>>,
    markers: [String; 3],
}

impl Lexicon {
    /// Fixed for every corpus seed, so corpora share a vocabulary.
    fn new() -> Self {
        let mut syllables: Vec<String> = ONSETS
            .iter()
            .flat_map(|o| NUCLEI.iter().flat_map(move |n| CODAS.iter().map(move |c| format!("{o}{n}{c}"))))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0x1e71c0);
        syllables.shuffle(&mut rng);
        let mut words = syllables.into_iter();
        let background = words.by_ref().take(BACKGROUND).collect();
        let clusters = (0..Label::COUNT)
            .map(|_| {
                (0..CLUSTERS_PER_CLASS)
                    .map(|_| words.by_ref().take(CLUSTER_SIZE).collect())
                    .collect()
            })
            .collect();
        let markers = [0, 1, 2].map(|_| words.next().unwrap());
        Lexicon {
            background,
            clusters,
            markers,
        }
    }

    fn cluster_words(&self, class: usize, rng: &mut ChaCha8Rng, count: usize) -> Vec<String> {
        let cluster = self.clusters[class].choose(rng).unwrap();
        (0..count).map(|_| cluster.choose(rng).unwrap().clone()).collect()
    }
}

fn junk(rng: &mut ChaCha8Rng) -> String {
    let len = rng.random_range(4..8);
    (0..len)
        .map(|_| {
            let c = rng.random_range(0..36u8);
            if c < 26 { (b'a' + c) as char } else { (b'0' + c - 26) as char }
        })
        .collect()
}

fn document(label: Label, lex: &Lexicon, zipf: &Zipf<f64>, rng: &mut ChaCha8Rng) -> String {
    let class = label.index();
    let background = rng.random_range(5..=12);
    let mut words: Vec<String> = (0..background)
        .map(|_| lex.background[zipf.sample(rng) as usize - 1].clone())
        .collect();
    let source = match label {
        Label::Clean => class,
        _ if rng.random::<f64>() < 0.8 => class,
        _ => rng.random_range(0..Label::COUNT),
    };
    let count = rng.random_range(2..=3);
    let mut signal = lex.cluster_words(source, rng, count);
    let borrow = match label {
        Label::Clean => 0.12,
        Label::Offensive => 0.1,
        Label::Hate => 0.35,
    };
    if rng.random::<f64>() < borrow {
        let other = if label == Label::Offensive { Label::Hate } else { Label::Offensive };
        signal.extend(lex.cluster_words(other.index(), rng, 1));
    }
    if label != Label::Clean && rng.random::<f64>() < 0.08 {
        signal.push(lex.markers[class].clone());
    }
    if rng.random::<f64>() < 0.25 {
        signal.push(junk(rng));
    }
    for w in signal {
        let at = rng.random_range(0..=words.len());
        words.insert(at, w);
    }
    let emoji_rate = if label == Label::Clean { 0.15 } else { 0.3 };
    if rng.random::<f64>() < emoji_rate {
        let e = *EMOJI[class].choose(rng).unwrap();
        if rng.random::<bool>() {
            words.push(e.to_string());
        } else {
            words.last_mut().unwrap().push_str(e);
        }
    }
    if rng.random::<f64>() < 0.03 {
        words.push(format!("0{}", rng.random_range(100_000_000u64..999_999_999)));
    }
    if rng.random::<f64>() < 0.03 {
        words.push(format!("{}{}@gmail.com", lex.background[rng.random_range(0..20)], rng.random_range(1..99)));
    }
    if rng.random::<f64>() < 0.3 {
        let first = &mut words[0];
        let mut chars = first.chars();
        let head: String = chars.next().map(|c| c.to_uppercase().collect()).unwrap_or_default();
        *first = head + chars.as_str();
    }
    let text = words.join(" ");
    if rng.random::<f64>() < 0.1 {
        text.nfd().collect()
    } else {
        text
    }
}

fn neighbour(label: Label, rng: &mut ChaCha8Rng) -> Label {
    match label {
        Label::Clean | Label::Hate => Label::Offensive,
        Label::Offensive if rng.random::<bool>() => Label::Hate,
        Label::Offensive => Label::Clean,
    }
}

/// `sizes` documents per class in a seed-determined order.
pub fn generate_synthetic_corpus(seed: u64, sizes: ClassSizes) -> Result<Vec<RawDocument>> {
    if Label::ALL.iter().any(|&l| sizes.get(l) == 0) {
        return Err(Error::InvalidArgument("every class needs at least one document".into()));
    }
    let lex = Lexicon::new();
    let zipf = Zipf::new(BACKGROUND as f64, 1.0).expect("valid Zipf parameters");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<Label> = Label::ALL.iter().flat_map(|&l| std::iter::repeat_n(l, sizes.get(l))).collect();
    labels.shuffle(&mut rng);
    Ok(labels
        .into_iter()
        .map(|label| {
            let source = if rng.random::<f64>() < ANNOTATION_NOISE { neighbour(label, &mut rng) } else { label };
            RawDocument {
                text: document(source, &lex, &zipf, &mut rng),
                label: Some(label),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_ratio() {
        let s = ClassSizes::reference_ratio(5_000);
        assert_eq!(s.total(), 5_000);
        assert_eq!((s.offensive, s.hate), (251, 174));
        let tiny = ClassSizes::reference_ratio(10);
        assert!(tiny.hate >= 1 && tiny.offensive >= 1);
    }

    #[test]
    fn exact_sizes_and_determinism() {
        let sizes = ClassSizes { clean: 30, offensive: 12, hate: 7 };
        let a = generate_synthetic_corpus(4, sizes).unwrap();
        for l in Label::ALL {
            assert_eq!(a.iter().filter(|d| d.label == Some(l)).count(), sizes.get(l));
        }
        assert_eq!(a, generate_synthetic_corpus(4, sizes).unwrap());
        assert_ne!(a, generate_synthetic_corpus(5, sizes).unwrap());
        assert!(generate_synthetic_corpus(4, ClassSizes { hate: 0, ..sizes }).is_err());
    }

    #[test]
    fn lexicon_roles_are_disjoint() {
        let lex = Lexicon::new();
        let mut all: Vec<&String> = lex.background.iter().collect();
        all.extend(lex.clusters.iter().flatten().flatten());
        all.extend(lex.markers.iter());
        let n = all.len();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), n);
        assert_eq!(n, BACKGROUND + 3 * CLUSTERS_PER_CLASS * CLUSTER_SIZE + 3);
    }
}
