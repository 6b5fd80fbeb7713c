//! Character vocabulary with special symbols and `__xx__` language tags.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, LanguageCode, SentencePair};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

#[derive(Debug, thiserror::Error)]
pub enum CodecError {
    #[error("cannot build a vocabulary from empty corpora")]
    EmptyCorpus,
    #[error("min_count must be at least 1")]
    InvalidMinCount,
    #[error("vocabulary has no tag for language {0}")]
    MissingTag(LanguageCode),
    #[error("token id {id} out of range for vocabulary of size {size}")]
    InvalidId { id: u32, size: usize },
    #[error("malformed vocabulary: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Symbol {
    Pad,
    Bos,
    Eos,
    Unk,
    Tag(LanguageCode),
    Char(char),
}

impl fmt::Display for Symbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Symbol::Pad => f.write_str(SPECIALS[0]),
            Symbol::Bos => f.write_str(SPECIALS[1]),
            Symbol::Eos => f.write_str(SPECIALS[2]),
            Symbol::Unk => f.write_str(SPECIALS[3]),
            Symbol::Tag(code) => f.write_str(&code.tag()),
            Symbol::Char(c) => write!(f, "{c}"),
        }
    }
}

impl Symbol {
    fn parse(s: &str) -> Result<Self, CodecError> {
        let mut chars = s.chars();
        if let (Some(c), None) = (chars.next(), chars.next()) {
            return Ok(Symbol::Char(c));
        }
        Ok(match s {
            "<pad>" => Symbol::Pad,
            "<s>" => Symbol::Bos,
            "</s>" => Symbol::Eos,
            "<unk>" => Symbol::Unk,
            _ => {
                let code = s
                    .strip_prefix("__")
                    .and_then(|r| r.strip_suffix("__"))
                    .ok_or_else(|| CodecError::Malformed(format!("unknown symbol {s:?}")))?;
                Symbol::Tag(
                    LanguageCode::new(code).map_err(|e| CodecError::Malformed(e.to_string()))?,
                )
            }
        })
    }
}

/// Bijective id ↔ symbol table. Ids are dense from 0: the four specials,
/// then language tags, then characters.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    symbols: Vec<Symbol>,
    chars: HashMap<char, u32>,
    tags: HashMap<LanguageCode, u32>,
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.symbols == other.symbols
    }
}

impl Eq for Vocabulary {}

impl Vocabulary {
    fn from_symbols(symbols: Vec<Symbol>) -> Result<Self, CodecError> {
        let expected = [Symbol::Pad, Symbol::Bos, Symbol::Eos, Symbol::Unk];
        if symbols.len() < 4 || symbols[..4] != expected {
            return Err(CodecError::Malformed(
                "specials must occupy ids 0..4".into(),
            ));
        }
        let mut chars = HashMap::new();
        let mut tags = HashMap::new();
        for (id, sym) in symbols.iter().enumerate().skip(4) {
            let fresh = match sym {
                Symbol::Char(c) => chars.insert(*c, id as u32).is_none(),
                Symbol::Tag(t) => tags.insert(t.clone(), id as u32).is_none(),
                other => {
                    return Err(CodecError::Malformed(format!(
                        "special {other} repeated at id {id}"
                    )))
                }
            };
            if !fresh {
                return Err(CodecError::Malformed(format!("duplicate symbol {sym}")));
            }
        }
        Ok(Self {
            symbols,
            chars,
            tags,
        })
    }

    /// Builds a vocabulary from a character stream: descending frequency,
    /// codepoint tiebreak.
    pub fn from_chars(chars: impl IntoIterator<Item = char>, tags: &[LanguageCode]) -> Self {
        let mut counts: BTreeMap<char, usize> = BTreeMap::new();
        for c in chars {
            *counts.entry(c).or_insert(0) += 1;
        }
        Self::from_counts(&counts, 1, tags)
    }

    fn from_counts(counts: &BTreeMap<char, usize>, min_count: usize, tags: &[LanguageCode]) -> Self {
        let mut symbols = vec![Symbol::Pad, Symbol::Bos, Symbol::Eos, Symbol::Unk];
        let tags: BTreeSet<&LanguageCode> = tags.iter().collect();
        symbols.extend(tags.into_iter().cloned().map(Symbol::Tag));
        let mut ranked: Vec<(char, usize)> = counts
            .iter()
            .filter(|(_, n)| **n >= min_count)
            .map(|(c, n)| (*c, *n))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        symbols.extend(ranked.into_iter().map(|(c, _)| Symbol::Char(c)));
        Self::from_symbols(symbols).expect("constructed symbols are unique")
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn symbol(&self, id: u32) -> Option<&Symbol> {
        self.symbols.get(id as usize)
    }

    pub fn symbols(&self) -> &[Symbol] {
        &self.symbols
    }

    pub fn id_of(&self, symbol: &Symbol) -> Option<u32> {
        match symbol {
            Symbol::Pad => Some(PAD),
            Symbol::Bos => Some(BOS),
            Symbol::Eos => Some(EOS),
            Symbol::Unk => Some(UNK),
            Symbol::Tag(t) => self.tags.get(t).copied(),
            Symbol::Char(c) => self.chars.get(c).copied(),
        }
    }

    pub fn contains_char(&self, c: char) -> bool {
        self.chars.contains_key(&c)
    }

    pub fn char_id(&self, c: char) -> u32 {
        self.chars.get(&c).copied().unwrap_or(UNK)
    }

    pub fn tag_id(&self, lang: &LanguageCode) -> Result<u32, CodecError> {
        self.tags
            .get(lang)
            .copied()
            .ok_or_else(|| CodecError::MissingTag(lang.clone()))
    }

    pub fn languages(&self) -> Vec<LanguageCode> {
        let mut langs: Vec<LanguageCode> = self.tags.keys().cloned().collect();
        langs.sort();
        langs
    }

    /// Ids the decoder must never emit: pad, bos, unk and every tag.
    pub fn non_output_ids(&self) -> Vec<u32> {
        let mut ids = vec![PAD, BOS, UNK];
        ids.extend(self.tags.values().copied());
        ids.sort_unstable();
        ids
    }

    /// Appends tags that are not yet present; existing ids are untouched.
    pub fn extend_with_tags(&self, tags: &[LanguageCode]) -> Vocabulary {
        let mut symbols = self.symbols.clone();
        let new: BTreeSet<&LanguageCode> =
            tags.iter().filter(|t| !self.tags.contains_key(*t)).collect();
        symbols.extend(new.into_iter().cloned().map(Symbol::Tag));
        Self::from_symbols(symbols).expect("new tags are unique")
    }

    /// Appends characters that are not yet present, most frequent first
    /// (codepoint tiebreak); existing ids are untouched.
    pub fn extend_with_chars(&self, chars: impl IntoIterator<Item = char>) -> Vocabulary {
        let mut counts: BTreeMap<char, usize> = BTreeMap::new();
        for c in chars.into_iter().filter(|c| !self.chars.contains_key(c)) {
            *counts.entry(c).or_insert(0) += 1;
        }
        let mut ranked: Vec<(char, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut symbols = self.symbols.clone();
        symbols.extend(ranked.into_iter().map(|(c, _)| Symbol::Char(c)));
        Self::from_symbols(symbols).expect("new chars are unique")
    }

    /// True when `older` is a prefix of this vocabulary (all its ids stable).
    pub fn extends(&self, older: &Vocabulary) -> bool {
        self.symbols.len() >= older.symbols.len()
            && self.symbols[..older.symbols.len()] == older.symbols[..]
    }

    pub fn encode_text(&self, text: &str) -> Vec<u32> {
        text.chars().map(|c| self.char_id(c)).collect()
    }

    /// `[tag(target_lang)] + chars + [eos]`
    pub fn encode_source(&self, text: &str, target_lang: &LanguageCode) -> Result<Vec<u32>, CodecError> {
        let mut ids = Vec::with_capacity(text.len() + 2);
        ids.push(self.tag_id(target_lang)?);
        ids.extend(text.chars().map(|c| self.char_id(c)));
        ids.push(EOS);
        Ok(ids)
    }

    /// `[bos] + chars + [eos]`
    pub fn encode_target(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::with_capacity(text.len() + 2);
        ids.push(BOS);
        ids.extend(text.chars().map(|c| self.char_id(c)));
        ids.push(EOS);
        ids
    }

    /// Concatenates character symbols; specials and tags are dropped.
    pub fn decode_ids(&self, ids: &[u32]) -> Result<String, CodecError> {
        let mut out = String::with_capacity(ids.len());
        for &id in ids {
            match self.symbol(id) {
                Some(Symbol::Char(c)) => out.push(*c),
                Some(_) => {}
                None => {
                    return Err(CodecError::InvalidId {
                        id,
                        size: self.len(),
                    })
                }
            }
        }
        Ok(out)
    }

    /// Stable 64-bit FNV-1a hash of the serialized symbol table.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for sym in &self.symbols {
            for b in sym.to_string().bytes().chain([0u8]) {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }

    pub fn fingerprint_hex(&self) -> String {
        format!("{:016x}", self.fingerprint())
    }

    pub fn save(&self, path: &Path) -> Result<(), CodecError> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CodecError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[derive(Serialize, Deserialize)]
struct VocabJson {
    symbols: Vec<String>,
    pad: u32,
    bos: u32,
    eos: u32,
    unk: u32,
}

impl Serialize for Vocabulary {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        VocabJson {
            symbols: self.symbols.iter().map(Symbol::to_string).collect(),
            pad: PAD,
            bos: BOS,
            eos: EOS,
            unk: UNK,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocabulary {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let json = VocabJson::deserialize(d)?;
        if (json.pad, json.bos, json.eos, json.unk) != (PAD, BOS, EOS, UNK) {
            return Err(serde::de::Error::custom("unexpected special indices"));
        }
        let symbols = json
            .symbols
            .iter()
            .map(|s| Symbol::parse(s))
            .collect::<Result<Vec<_>, _>>()
            .map_err(serde::de::Error::custom)?;
        Vocabulary::from_symbols(symbols).map_err(serde::de::Error::custom)
    }
}

/// Character vocabulary over both sides of `corpora`, with a tag for every
/// language that appears in them.
pub fn build_vocab(corpora: &[&Corpus], min_count: usize) -> Result<Vocabulary, CodecError> {
    if min_count == 0 {
        return Err(CodecError::InvalidMinCount);
    }
    if corpora.iter().all(|c| c.is_empty()) {
        return Err(CodecError::EmptyCorpus);
    }
    let mut counts: BTreeMap<char, usize> = BTreeMap::new();
    let mut tags = BTreeSet::new();
    for corpus in corpora {
        tags.insert(corpus.pair().source.clone());
        tags.insert(corpus.pair().target.clone());
        for p in corpus.pairs() {
            for c in p.source.chars().chain(p.target.chars()) {
                *counts.entry(c).or_insert(0) += 1;
            }
        }
    }
    let tags: Vec<LanguageCode> = tags.into_iter().collect();
    Ok(Vocabulary::from_counts(&counts, min_count, &tags))
}

/// Source ids carry the target-language tag; target ids are framed by bos/eos.
pub fn encode_pair(pair: &SentencePair, vocab: &Vocabulary) -> Result<(Vec<u32>, Vec<u32>), CodecError> {
    vocab.tag_id(&pair.pair.source)?;
    let src = vocab.encode_source(&pair.source, &pair.pair.target)?;
    Ok((src, vocab.encode_target(&pair.target)))
}

pub fn decode_ids(ids: &[u32], vocab: &Vocabulary) -> Result<String, CodecError> {
    vocab.decode_ids(ids)
}
