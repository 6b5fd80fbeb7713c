use std::collections::BTreeSet;
use std::fmt;
use std::sync::{OnceLock, RwLock};

use serde::{Deserialize, Serialize};

use super::{CorpusError, Result};

/// The eleven target languages of the shared task.
pub const TASK_LANGUAGES: [&str; 11] = [
    "aym", "bzd", "cni", "czn", "gn", "hch", "nah", "oto", "quy", "shp", "tar",
];

fn registry() -> &'static RwLock<BTreeSet<String>> {
    static REGISTRY: OnceLock<RwLock<BTreeSet<String>>> = OnceLock::new();
    REGISTRY.get_or_init(|| {
        let mut set: BTreeSet<String> = TASK_LANGUAGES.iter().map(|s| s.to_string()).collect();
        set.insert("es".into());
        set.insert("en".into());
        RwLock::new(set)
    })
}

fn valid_code(code: &str) -> bool {
    !code.is_empty()
        && code.len() <= 16
        && code
            .chars()
            .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
        && code.starts_with(|c: char| c.is_ascii_lowercase())
}

/// Adds a code to the process-wide language registry.
pub fn register_language(code: &str) -> Result<LanguageCode> {
    if !valid_code(code) {
        return Err(CorpusError::InvalidLanguage(code.to_string()));
    }
    registry()
        .write()
        .expect("language registry poisoned")
        .insert(code.to_string());
    Ok(LanguageCode(code.to_string()))
}

pub fn registered_languages() -> Vec<LanguageCode> {
    registry()
        .read()
        .expect("language registry poisoned")
        .iter()
        .cloned()
        .map(LanguageCode)
        .collect()
}

/// Short lowercase language identifier, e.g. `quy`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct LanguageCode(String);

impl LanguageCode {
    /// Parses a registered code.
    pub fn new(code: &str) -> Result<Self> {
        if !valid_code(code) {
            return Err(CorpusError::InvalidLanguage(code.to_string()));
        }
        if !registry()
            .read()
            .expect("language registry poisoned")
            .contains(code)
        {
            return Err(CorpusError::UnregisteredLanguage(code.to_string()));
        }
        Ok(Self(code.to_string()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// The vocabulary symbol for this language, `__code__`.
    pub fn tag(&self) -> String {
        format!("__{}__", self.0)
    }
}

impl fmt::Display for LanguageCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for LanguageCode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        LanguageCode::new(&s).map_err(serde::de::Error::custom)
    }
}

/// Translation direction, written `src-tgt`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LanguagePair {
    pub source: LanguageCode,
    pub target: LanguageCode,
}

impl LanguagePair {
    pub fn new(source: LanguageCode, target: LanguageCode) -> Self {
        Self { source, target }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let (a, b) = s
            .split_once('-')
            .ok_or_else(|| CorpusError::InvalidLanguage(s.to_string()))?;
        Ok(Self::new(LanguageCode::new(a)?, LanguageCode::new(b)?))
    }

    pub fn reversed(&self) -> Self {
        Self::new(self.target.clone(), self.source.clone())
    }
}

impl fmt::Display for LanguagePair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.source, self.target)
    }
}

impl Serialize for LanguagePair {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LanguagePair {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        LanguagePair::parse(&s).map_err(serde::de::Error::custom)
    }
}
