//! Text clean-up applied before training: detokenization, replacement of
//! punctuation the vocabulary lacks, and Chatino superscript tone handling.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use super::{read_char_tsv, CorpusError, Result};
use crate::codec::Vocabulary;

/// Punctuation that attaches to the preceding token.
const CLOSING: &[char] = &['.', ',', ';', ':', '!', '?', ')', ']', '}', '»'];
/// Punctuation that attaches to the following token.
const OPENING: &[char] = &['¿', '¡', '(', '[', '{', '«'];

/// Undoes token spacing around punctuation.
///
/// Rules, applied to whitespace-separated tokens:
/// - a token made only of closing punctuation `.,;:!?)]}»` joins the previous token;
/// - a token made only of opening punctuation `¿¡([{«` joins the next token;
/// - a lone `"` alternates: odd occurrences join the next token, even ones the previous.
///
/// Runs of whitespace collapse to a single space.
pub fn detokenize(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut glue_next = false;
    let mut quote_open = false;
    for (i, tok) in text.split_whitespace().enumerate() {
        let mut space = i > 0 && !glue_next;
        glue_next = false;
        if tok == "\"" {
            if quote_open {
                space = false;
            } else {
                glue_next = true;
            }
            quote_open = !quote_open;
        } else if tok.chars().all(|c| CLOSING.contains(&c)) {
            space = false;
        } else if tok.chars().all(|c| OPENING.contains(&c)) {
            glue_next = true;
        }
        if space {
            out.push(' ');
        }
        out.push_str(tok);
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplacementReport {
    /// Out-of-vocabulary characters that were rewritten via the mapping.
    pub replaced: BTreeMap<char, usize>,
    /// Out-of-vocabulary characters with no mapping; left in place.
    pub unmapped: BTreeMap<char, usize>,
}

impl ReplacementReport {
    pub fn is_empty(&self) -> bool {
        self.replaced.is_empty() && self.unmapped.is_empty()
    }

    pub fn absorb(&mut self, other: &ReplacementReport) {
        for (c, n) in &other.replaced {
            *self.replaced.entry(*c).or_insert(0) += n;
        }
        for (c, n) in &other.unmapped {
            *self.unmapped.entry(*c).or_insert(0) += n;
        }
    }
}

/// Rewrites characters missing from `vocab` using `mapping`. Characters with
/// no mapping are kept and reported.
pub fn map_unsupported_punct(
    text: &str,
    vocab: &Vocabulary,
    mapping: &BTreeMap<char, char>,
) -> (String, ReplacementReport) {
    let mut report = ReplacementReport::default();
    let mapped = text
        .chars()
        .map(|c| {
            if c.is_whitespace() || vocab.contains_char(c) {
                return c;
            }
            match mapping.get(&c) {
                Some(&to) => {
                    *report.replaced.entry(c).or_insert(0) += 1;
                    to
                }
                None => {
                    *report.unmapped.entry(c).or_insert(0) += 1;
                    c
                }
            }
        })
        .collect();
    (mapped, report)
}

/// Fraction of segments containing at least one character outside `vocab`.
pub fn oov_segment_rate<'a>(segments: impl IntoIterator<Item = &'a str>, vocab: &Vocabulary) -> f64 {
    let (mut total, mut hit) = (0usize, 0usize);
    for s in segments {
        total += 1;
        if s.chars().any(|c| !c.is_whitespace() && !vocab.contains_char(c)) {
            hit += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

/// Injective superscript → standard character table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CharTable {
    forward: BTreeMap<char, char>,
    inverse: BTreeMap<char, char>,
}

impl CharTable {
    pub fn new(pairs: impl IntoIterator<Item = (char, char)>) -> Result<Self> {
        let mut forward = BTreeMap::new();
        let mut inverse = BTreeMap::new();
        for (from, to) in pairs {
            let reason = if forward.insert(from, to).is_some() {
                Some(format!("{from:?} mapped twice"))
            } else if inverse.insert(to, from).is_some() {
                Some(format!("{to:?} is the image of two characters"))
            } else {
                None
            };
            if let Some(reason) = reason {
                return Err(CorpusError::Table {
                    path: "<table>".into(),
                    line: 0,
                    reason,
                });
            }
        }
        if let Some(c) = forward.keys().find(|c| inverse.contains_key(c)) {
            return Err(CorpusError::Table {
                path: "<table>".into(),
                line: 0,
                reason: format!("{c:?} appears on both sides"),
            });
        }
        Ok(Self { forward, inverse })
    }

    pub fn from_tsv(path: &Path) -> Result<Self> {
        Self::new(read_char_tsv(path)?).map_err(|e| match e {
            CorpusError::Table { reason, .. } => CorpusError::Table {
                path: path.display().to_string(),
                line: 0,
                reason,
            },
            other => other,
        })
    }

    /// Superscript digits and the modifier capital letters U+1D2C–U+1D42,
    /// each paired with its compatibility decomposition.
    pub fn czn_default() -> Self {
        let digits = ['\u{2070}', '\u{00B9}', '\u{00B2}', '\u{00B3}']
            .into_iter()
            .chain('\u{2074}'..='\u{2079}');
        let pairs = digits
            .chain('\u{1D2C}'..='\u{1D42}')
            .filter_map(|c| {
                let mut decomposed = std::iter::once(c).nfkc();
                match (decomposed.next(), decomposed.next()) {
                    (Some(d), None) if d != c => Some((c, d)),
                    _ => None,
                }
            });
        Self::new(pairs).expect("default czn table is injective")
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (char, char)> + '_ {
        self.forward.iter().map(|(a, b)| (*a, *b))
    }

    pub fn superscripts(&self) -> impl Iterator<Item = char> + '_ {
        self.forward.keys().copied()
    }
}

/// Replaces word-final runs of characters found in `map`. A word is a maximal
/// run of non-whitespace; trailing closing punctuation is skipped over, and
/// the run must be preceded by at least one character outside `map`.
fn rewrite_word_finals(text: &str, map: &BTreeMap<char, char>) -> String {
    let mut out = String::with_capacity(text.len());
    let mut word: Vec<char> = Vec::new();
    let flush = |word: &mut Vec<char>, out: &mut String| {
        let mut end = word.len();
        while end > 0 && (CLOSING.contains(&word[end - 1]) || word[end - 1] == '"') {
            end -= 1;
        }
        let mut start = end;
        while start > 0 && map.contains_key(&word[start - 1]) {
            start -= 1;
        }
        if start > 0 && start < end {
            for c in &mut word[start..end] {
                *c = map[c];
            }
        }
        out.extend(word.drain(..));
    };
    for c in text.chars() {
        if c.is_whitespace() {
            flush(&mut word, &mut out);
            out.push(c);
        } else {
            word.push(c);
        }
    }
    flush(&mut word, &mut out);
    out
}

/// Turns word-final superscript tone marks into their standard characters.
pub fn czn_normalize(text: &str, table: &CharTable) -> String {
    rewrite_word_finals(text, &table.forward)
}

/// Inverse of [`czn_normalize`]: superscripts word-final runs of standard
/// tone characters.
pub fn czn_restore(text: &str, table: &CharTable) -> String {
    rewrite_word_finals(text, &table.inverse)
}
