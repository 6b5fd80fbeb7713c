//! Seeded synthetic languages for desk experiments: Spanish-like sentences
//! and per-language letter substitution ciphers over them.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{self, register_language, Corpus, LanguageCode, LanguagePair, Provenance};

const ONSETS: &[&str] = &[
    "b", "c", "d", "f", "g", "l", "m", "n", "p", "r", "s", "t", "v", "ch", "ll", "qu", "br", "tr", "pl", "ñ",
];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "a", "e", "o", "á", "é", "í", "ó", "ú"];
const CODAS: &[&str] = &["", "", "", "n", "s", "r", "l"];
const FUNCTION_WORDS: &[&str] = &["el", "la", "de", "que", "en", "y", "los", "un", "una", "por", "con", "se"];

/// Letters the sentence generator can emit; ciphers permute exactly these.
pub const ALPHABET: &str = "abcdefghilmnopqrstuvñáéíóú";

/// Generates `n` lowercase Spanish-like sentences of `min_words..=max_words`
/// words, ending in a period.
pub fn spanish_like_sentences(seed: u64, n: usize, min_words: usize, max_words: usize) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let words = rng.random_range(min_words..=max_words);
            let mut s: Vec<String> = (0..words)
                .map(|_| {
                    if rng.random::<f64>() < 0.3 {
                        FUNCTION_WORDS[rng.random_range(0..FUNCTION_WORDS.len())].to_string()
                    } else {
                        let syllables = rng.random_range(1..=3);
                        let mut w = String::new();
                        for i in 0..syllables {
                            w.push_str(ONSETS[rng.random_range(0..ONSETS.len())]);
                            w.push_str(VOWELS[rng.random_range(0..VOWELS.len())]);
                            if i + 1 == syllables {
                                w.push_str(CODAS[rng.random_range(0..CODAS.len())]);
                            }
                        }
                        w
                    }
                })
                .collect();
            s.last_mut().unwrap().push('.');
            s.join(" ")
        })
        .collect()
}

/// A synthetic language: a bijective letter substitution applied to Spanish.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cipher {
    pub language: LanguageCode,
    pub table: BTreeMap<char, char>,
}

impl Cipher {
    /// Random permutation of [`ALPHABET`]; registers `code` as a language.
    pub fn random(code: &str, seed: u64) -> corpus::Result<Self> {
        let language = register_language(code)?;
        let letters: Vec<char> = ALPHABET.chars().collect();
        let mut images = letters.clone();
        images.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Ok(Self {
            language,
            table: letters.into_iter().zip(images).collect(),
        })
    }

    /// A cipher agreeing with `base` on `shared` (a fraction) of the letters;
    /// the remaining letters have their images rotated so every one differs.
    pub fn derived(code: &str, base: &Cipher, shared: f64, seed: u64) -> corpus::Result<Self> {
        let language = register_language(code)?;
        let mut letters: Vec<char> = base.table.keys().copied().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        letters.shuffle(&mut rng);
        let changed = ((1.0 - shared) * letters.len() as f64).round() as usize;
        let mut table = base.table.clone();
        if changed >= 2 {
            let moved = &letters[..changed];
            for (i, c) in moved.iter().enumerate() {
                table.insert(*c, base.table[&moved[(i + 1) % changed]]);
            }
        }
        Ok(Self { language, table })
    }

    pub fn encipher(&self, text: &str) -> String {
        text.chars().map(|c| *self.table.get(&c).unwrap_or(&c)).collect()
    }

    pub fn decipher(&self, text: &str) -> String {
        let inverse: BTreeMap<char, char> = self.table.iter().map(|(a, b)| (*b, *a)).collect();
        text.chars().map(|c| *inverse.get(&c).unwrap_or(&c)).collect()
    }

    /// Fraction of letters mapped identically by both ciphers.
    pub fn agreement(&self, other: &Cipher) -> f64 {
        let same = self
            .table
            .iter()
            .filter(|(k, v)| other.table.get(k) == Some(v))
            .count();
        same as f64 / self.table.len() as f64
    }

    /// `source_lang → cipher` corpus over `sentences`.
    pub fn corpus(&self, source_lang: &LanguageCode, sentences: &[String], provenance: Provenance) -> corpus::Result<Corpus> {
        let pair = LanguagePair::new(source_lang.clone(), self.language.clone());
        Corpus::from_texts(pair, provenance, sentences.iter().map(|s| (s.clone(), self.encipher(s))))
    }
}
