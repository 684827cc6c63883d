//! Text normalization for noisy social-media comments.
//!
//! The pipeline is `normalize_text` → `mask_pii` → `split_tokens`. Each stage
//! is a pure function and the composition is idempotent: cleaning already
//! cleaned text returns it unchanged.

use std::io::{BufRead, Write};
use std::sync::LazyLock;

use regex::Regex;
use unicode_normalization::UnicodeNormalization;
use unicode_properties::{GeneralCategoryGroup, UnicodeEmoji, UnicodeGeneralCategory};

use crate::error::Result;
use crate::label::Label;

pub const EMOJI_TOKEN: &str = "EMOJI";
pub const EMAIL_TOKEN: &str = "EMAIL";
pub const PHONE_TOKEN: &str = "PHONE";

/// Placeholder words that survive lowercasing so that cleaning is idempotent.
pub const PLACEHOLDERS: [&str; 3] = [EMOJI_TOKEN, EMAIL_TOKEN, PHONE_TOKEN];

static PLACEHOLDER_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\b(?:EMOJI|EMAIL|PHONE)\b").unwrap());
static EMAIL_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"[\p{L}\p{N}._%+\-]+@[\p{L}\p{N}\-]+(?:\.[\p{L}\p{N}\-]+)*\.\p{L}{2,}").unwrap()
});
static DIGIT_RUN_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\+?[0-9]+").unwrap());

const MIN_PHONE_DIGITS: usize = 9;
const MAX_PHONE_DIGITS: usize = 11;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawDocument {
    pub text: String,
    pub label: Option<Label>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CleanDocument {
    pub tokens: Vec<String>,
    pub label: Option<Label>,
}

impl CleanDocument {
    pub fn from_tokens<S: Into<String>>(tokens: impl IntoIterator<Item = S>) -> Self {
        CleanDocument {
            tokens: tokens.into_iter().map(Into::into).collect(),
            label: None,
        }
    }
}

/// Characters that attach to a preceding emoji (joiners, selectors, keycaps, tags).
fn is_emoji_continuation(c: char) -> bool {
    matches!(c, '\u{200D}' | '\u{FE0E}' | '\u{FE0F}' | '\u{20E3}' | '\u{E0020}'..='\u{E007F}')
}

/// ASCII digits, `#` and `*` carry the Emoji property but are ordinary text here.
fn is_emoji(c: char) -> bool {
    !c.is_ascii() && c.is_emoji_char()
}

fn fold_case(segment: &str, out: &mut String) {
    let composed: String = segment.nfc().collect();
    out.extend(composed.to_lowercase().nfc());
}

/// NFC-normalize, lowercase and replace every emoji run with `EMOJI`.
pub fn normalize_text(text: &str) -> String {
    let mut folded = String::with_capacity(text.len());
    let mut last = 0;
    for m in PLACEHOLDER_RE.find_iter(text) {
        fold_case(&text[last..m.start()], &mut folded);
        folded.push_str(m.as_str());
        last = m.end();
    }
    fold_case(&text[last..], &mut folded);

    let mut out = String::with_capacity(folded.len());
    let mut in_run = false;
    for c in folded.chars() {
        if is_emoji(c) || (in_run && is_emoji_continuation(c)) {
            if !in_run {
                if out.chars().next_back().is_some_and(|p| !p.is_whitespace()) {
                    out.push(' ');
                }
                out.push_str(EMOJI_TOKEN);
                in_run = true;
            }
            continue;
        }
        if matches!(c, '\u{FE0E}' | '\u{FE0F}') {
            continue;
        }
        if in_run && !c.is_whitespace() {
            out.push(' ');
        }
        in_run = false;
        out.push(c);
    }
    out
}

/// Replace e-mail addresses with `EMAIL` and digit runs of 9 to 11 (optional `+`) with `PHONE`.
pub fn mask_pii(text: &str) -> String {
    let emails = EMAIL_RE.replace_all(text, EMAIL_TOKEN);
    DIGIT_RUN_RE
        .replace_all(&emails, |caps: &regex::Captures<'_>| {
            let run = &caps[0];
            let digits = run.trim_start_matches('+').len();
            if (MIN_PHONE_DIGITS..=MAX_PHONE_DIGITS).contains(&digits) {
                PHONE_TOKEN.to_string()
            } else {
                run.to_string()
            }
        })
        .into_owned()
}

fn is_punctuation(c: char) -> bool {
    c.general_category_group() == GeneralCategoryGroup::Punctuation
}

/// Split on whitespace and detach punctuation characters as their own tokens.
pub fn split_tokens(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for chunk in text.split_whitespace() {
        let mut current = String::new();
        for c in chunk.chars() {
            if is_punctuation(c) {
                if !current.is_empty() {
                    tokens.push(std::mem::take(&mut current));
                }
                tokens.push(c.to_string());
            } else {
                current.push(c);
            }
        }
        if !current.is_empty() {
            tokens.push(current);
        }
    }
    tokens
}

pub fn clean_text(text: &str) -> Vec<String> {
    split_tokens(&mask_pii(&normalize_text(text)))
}

pub fn clean(doc: &RawDocument) -> CleanDocument {
    CleanDocument {
        tokens: clean_text(&doc.text),
        label: doc.label,
    }
}

/// A TSV line that could not be parsed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MalformedLine {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Default)]
pub struct TsvCorpus {
    pub documents: Vec<RawDocument>,
    pub malformed: Vec<MalformedLine>,
    /// Record lines seen (comments and blank lines excluded).
    pub records: usize,
}

impl TsvCorpus {
    pub fn skipped_fraction(&self) -> f64 {
        if self.records == 0 {
            0.0
        } else {
            self.malformed.len() as f64 / self.records as f64
        }
    }
}

/// Parse one `label<TAB>text` record. `-` marks an unlabeled document.
pub fn parse_record(line: &str) -> std::result::Result<RawDocument, String> {
    let (label, text) = line
        .split_once('\t')
        .ok_or_else(|| "missing TAB separator".to_string())?;
    let label = match label {
        "-" => None,
        other => Some(other.parse::<Label>().map_err(|e| e.to_string())?),
    };
    Ok(RawDocument {
        text: text.to_string(),
        label,
    })
}

pub fn read_tsv<R: BufRead>(reader: R) -> Result<TsvCorpus> {
    let mut corpus = TsvCorpus::default();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        corpus.records += 1;
        match parse_record(line) {
            Ok(doc) => corpus.documents.push(doc),
            Err(reason) => corpus.malformed.push(MalformedLine {
                line: idx + 1,
                reason,
            }),
        }
    }
    Ok(corpus)
}

pub fn write_tsv<'a, W: Write>(
    mut writer: W,
    docs: impl IntoIterator<Item = &'a CleanDocument>,
) -> Result<()> {
    for doc in docs {
        let label = doc.label.map_or("-", Label::as_str);
        writeln!(writer, "{label}\t{}", doc.tokens.join(" "))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn lowercases() {
        assert_eq!(normalize_text("ABC"), "abc");
    }

    #[test]
    fn collapses_emoji_runs() {
        assert_eq!(normalize_text("good 😀😀 job"), "good EMOJI job");
        assert_eq!(normalize_text("good😀job"), "good EMOJI job");
        assert_eq!(normalize_text("👍🏽 ok"), "EMOJI ok");
        assert_eq!(normalize_text("👨\u{200D}👩\u{200D}👧"), "EMOJI");
        assert_eq!(normalize_text("❤\u{FE0F}!"), "EMOJI !");
    }

    #[test]
    fn ascii_digits_are_not_emoji() {
        assert_eq!(normalize_text("room 101 #1 *"), "room 101 #1 *");
    }

    #[test]
    fn composes_to_nfc() {
        let decomposed = "e\u{0301}";
        assert_eq!(normalize_text(decomposed), "\u{00E9}");
        assert_eq!(normalize_text("E\u{0301}"), "\u{00E9}");
    }

    #[test]
    fn placeholders_survive_normalization() {
        assert_eq!(normalize_text("Hi EMOJI and EMAIL"), "hi EMOJI and EMAIL");
        assert_eq!(normalize_text("EMOJIS"), "emojis");
    }

    #[test]
    fn masks_phone_numbers() {
        assert_eq!(mask_pii("call 0912345678 now"), "call PHONE now");
        assert_eq!(mask_pii("call +84912345678"), "call PHONE");
        assert_eq!(mask_pii("room 101"), "room 101");
        assert_eq!(mask_pii("id 123456789012"), "id 123456789012");
        assert_eq!(mask_pii("12345678"), "12345678");
    }

    #[test]
    fn masks_emails() {
        assert_eq!(mask_pii("mail a@b.co"), "mail EMAIL");
        assert_eq!(mask_pii("(x.y@mail.example.vn),"), "(EMAIL),");
        assert_eq!(mask_pii("a@b.c"), "a@b.c");
        assert_eq!(mask_pii("@b.co"), "@b.co");
    }

    #[test]
    fn splits_tokens() {
        assert_eq!(split_tokens("a b"), vec!["a", "b"]);
        assert_eq!(split_tokens("ok,"), vec!["ok", ","]);
        assert!(split_tokens("").is_empty());
        assert_eq!(split_tokens("  x...y  "), vec!["x", ".", ".", ".", "y"]);
    }

    #[test]
    fn full_pipeline() {
        assert_eq!(clean_text("HELLO 😀 call 0912345678!"), vec![
            "hello", "EMOJI", "call", "PHONE", "!"
        ]);
    }

    #[test]
    fn parses_tsv() {
        let input = "# comment\nHATE\thello 😀\n-\tunlabeled text\nbroken line\nFOO\tx\n\n";
        let corpus = read_tsv(input.as_bytes()).unwrap();
        assert_eq!(corpus.documents.len(), 2);
        assert_eq!(corpus.documents[0].label, Some(Label::Hate));
        assert_eq!(corpus.documents[1].label, None);
        assert_eq!(corpus.records, 4);
        let lines: Vec<usize> = corpus.malformed.iter().map(|m| m.line).collect();
        assert_eq!(lines, vec![4, 5]);

        let cleaned: Vec<_> = corpus.documents.iter().map(clean).collect();
        let mut out = Vec::new();
        write_tsv(&mut out, &cleaned).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "HATE\thello EMOJI\n-\tunlabeled text\n"
        );
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(s in "\\PC{0,40}") {
            let once = normalize_text(&s);
            prop_assert_eq!(normalize_text(&once), once);
        }

        #[test]
        fn mask_is_idempotent(s in "[a-z0-9@+. ]{0,40}") {
            let once = mask_pii(&s);
            prop_assert_eq!(mask_pii(&once), once);
        }

        #[test]
        fn mask_leaves_plain_words(words in prop::collection::vec("[a-z\u{00E0}-\u{00FF}]{1,8}", 0..8)) {
            let text = words.join(" ");
            prop_assert_eq!(mask_pii(&text), text);
        }

        #[test]
        fn split_rejoins_cleanly(s in "\\PC{0,40}") {
            let tokens = clean_text(&s);
            let joined = tokens.join(" ");
            prop_assert!(!joined.contains("  "));
            prop_assert_eq!(joined.trim(), joined.as_str());
            for t in &tokens {
                prop_assert!(!t.is_empty());
                prop_assert!(!t.chars().any(char::is_whitespace));
            }
            prop_assert_eq!(clean_text(&joined), tokens);
        }
    }
}
