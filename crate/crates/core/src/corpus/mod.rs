//! Parallel corpora with per-source provenance.
//!
//! A [`Corpus`] holds aligned segments for one language pair. Corpora are
//! loaded from pairs of line-aligned UTF-8 files, normalized to NFC, and can
//! be audited for duplicates/overlap and merged into a training set whose
//! [`Manifest`] records how many pairs came from each source.

mod language;
mod normalize;

pub use language::{register_language, registered_languages, LanguageCode, LanguagePair, TASK_LANGUAGES};
pub use normalize::{
    czn_normalize, czn_restore, detokenize, map_unsupported_punct, oov_segment_rate, CharTable,
    ReplacementReport,
};

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use unicode_normalization::{is_nfc_quick, IsNormalized, UnicodeNormalization};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: invalid UTF-8 at byte {offset}")]
    Encoding { path: PathBuf, offset: usize },
    #[error("line counts differ: {src_lines} source vs {tgt_lines} target")]
    AlignmentMismatch { src_lines: usize, tgt_lines: usize },
    #[error("empty segment at line {line}")]
    EmptySegment { line: usize },
    #[error("language pair mismatch: expected {expected}, found {found}")]
    PairMismatch {
        expected: LanguagePair,
        found: LanguagePair,
    },
    #[error("invalid language code {0:?}")]
    InvalidLanguage(String),
    #[error("unregistered language code {0:?}")]
    UnregisteredLanguage(String),
    #[error("invalid provenance tag {0:?}")]
    InvalidProvenance(String),
    #[error("table {path} line {line}: {reason}")]
    Table {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("no corpora given")]
    NoCorpora,
}

pub type Result<T, E = CorpusError> = std::result::Result<T, E>;

/// Where a sentence pair came from.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Provenance {
    /// Shared-task training data released by the organizers.
    Anlp23,
    Helsinki,
    Repucs,
    Nllb,
    Bibles,
    /// Synthetic pairs produced by a reverse model.
    Backtrans,
    Other(String),
}

impl Provenance {
    pub fn as_str(&self) -> &str {
        match self {
            Provenance::Anlp23 => "anlp23",
            Provenance::Helsinki => "helsinki",
            Provenance::Repucs => "repucs",
            Provenance::Nllb => "nllb",
            Provenance::Bibles => "bibles",
            Provenance::Backtrans => "backtrans",
            Provenance::Other(s) => s,
        }
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Provenance {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "anlp23" => Provenance::Anlp23,
            "helsinki" => Provenance::Helsinki,
            "repucs" => Provenance::Repucs,
            "nllb" => Provenance::Nllb,
            "bibles" => Provenance::Bibles,
            "backtrans" => Provenance::Backtrans,
            other => {
                let valid = !other.is_empty()
                    && other
                        .chars()
                        .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
                if !valid {
                    return Err(CorpusError::InvalidProvenance(other.to_string()));
                }
                Provenance::Other(other.to_string())
            }
        })
    }
}

impl Serialize for Provenance {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Provenance {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SentencePair {
    pub source: String,
    pub target: String,
    pub pair: LanguagePair,
    pub provenance: Provenance,
}

impl SentencePair {
    /// Builds a pair, rejecting segments that are empty after trimming.
    pub fn new(
        source: impl Into<String>,
        target: impl Into<String>,
        pair: LanguagePair,
        provenance: Provenance,
    ) -> Result<Self> {
        let source = source.into();
        let target = target.into();
        if source.trim().is_empty() || target.trim().is_empty() {
            return Err(CorpusError::EmptySegment { line: 0 });
        }
        Ok(Self {
            source,
            target,
            pair,
            provenance,
        })
    }

    fn key(&self) -> (String, String) {
        (nfc(&self.source), nfc(&self.target))
    }
}

/// An ordered collection of sentence pairs sharing one language pair.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pair: LanguagePair,
    pairs: Vec<SentencePair>,
}

impl Corpus {
    pub fn new(pair: LanguagePair) -> Self {
        Self {
            pair,
            pairs: Vec::new(),
        }
    }

    pub fn from_pairs(pair: LanguagePair, pairs: Vec<SentencePair>) -> Result<Self> {
        let mut corpus = Self::new(pair);
        for p in pairs {
            corpus.push(p)?;
        }
        Ok(corpus)
    }

    /// Convenience constructor from `(source, target)` strings with one provenance.
    pub fn from_texts<S: AsRef<str>, T: AsRef<str>>(
        pair: LanguagePair,
        provenance: Provenance,
        texts: impl IntoIterator<Item = (S, T)>,
    ) -> Result<Self> {
        let mut corpus = Self::new(pair.clone());
        for (i, (s, t)) in texts.into_iter().enumerate() {
            let sp = SentencePair::new(s.as_ref(), t.as_ref(), pair.clone(), provenance.clone())
                .map_err(|_| CorpusError::EmptySegment { line: i + 1 })?;
            corpus.pairs.push(sp);
        }
        Ok(corpus)
    }

    pub fn push(&mut self, sp: SentencePair) -> Result<()> {
        if sp.pair != self.pair {
            return Err(CorpusError::PairMismatch {
                expected: self.pair.clone(),
                found: sp.pair,
            });
        }
        self.pairs.push(sp);
        Ok(())
    }

    pub fn pair(&self) -> &LanguagePair {
        &self.pair
    }

    pub fn pairs(&self) -> &[SentencePair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn sources(&self) -> impl Iterator<Item = &str> {
        self.pairs.iter().map(|p| p.source.as_str())
    }

    pub fn targets(&self) -> impl Iterator<Item = &str> {
        self.pairs.iter().map(|p| p.target.as_str())
    }

    /// Keeps only pairs whose provenance satisfies `keep`.
    pub fn retain_provenance(&mut self, mut keep: impl FnMut(&Provenance) -> bool) {
        self.pairs.retain(|p| keep(&p.provenance));
    }

    /// Applies `f` to both sides of every pair, dropping pairs that become empty.
    pub fn map_text(&self, mut f: impl FnMut(&str) -> String) -> Corpus {
        let pairs = self
            .pairs
            .iter()
            .filter_map(|p| {
                SentencePair::new(f(&p.source), f(&p.target), p.pair.clone(), p.provenance.clone())
                    .ok()
            })
            .collect();
        Corpus {
            pair: self.pair.clone(),
            pairs,
        }
    }

    /// Writes the two sides back to line-aligned files.
    pub fn write_parallel(&self, src_path: &Path, tgt_path: &Path) -> Result<()> {
        write_lines(src_path, self.sources())?;
        write_lines(tgt_path, self.targets())
    }
}

pub(crate) fn nfc(s: &str) -> String {
    match is_nfc_quick(s.chars()) {
        IsNormalized::Yes => s.to_string(),
        _ => s.nfc().collect(),
    }
}

/// Reads a UTF-8 file and splits it into `\n`-terminated lines (a final
/// newline does not produce an extra empty line).
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let bytes = fs::read(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let text = String::from_utf8(bytes).map_err(|e| CorpusError::Encoding {
        path: path.to_path_buf(),
        offset: e.utf8_error().valid_up_to(),
    })?;
    if text.is_empty() {
        return Ok(Vec::new());
    }
    let body = text.strip_suffix('\n').unwrap_or(&text);
    Ok(body.split('\n').map(str::to_string).collect())
}

pub fn write_lines<'a>(path: &Path, lines: impl IntoIterator<Item = &'a str>) -> Result<()> {
    let io = |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(io)?;
        }
    }
    let mut out = std::io::BufWriter::new(fs::File::create(path).map_err(io)?);
    for line in lines {
        out.write_all(line.as_bytes()).map_err(io)?;
        out.write_all(b"\n").map_err(io)?;
    }
    out.flush().map_err(io)
}

/// Loads two line-aligned files as a corpus. Segments are NFC-normalized.
pub fn load_parallel(
    src_path: &Path,
    tgt_path: &Path,
    pair: LanguagePair,
    provenance: Provenance,
) -> Result<Corpus> {
    let src = read_lines(src_path)?;
    let tgt = read_lines(tgt_path)?;
    if src.len() != tgt.len() {
        return Err(CorpusError::AlignmentMismatch {
            src_lines: src.len(),
            tgt_lines: tgt.len(),
        });
    }
    let mut pairs = Vec::with_capacity(src.len());
    for (i, (s, t)) in src.into_iter().zip(tgt).enumerate() {
        let sp = SentencePair::new(nfc(&s), nfc(&t), pair.clone(), provenance.clone())
            .map_err(|_| CorpusError::EmptySegment { line: i + 1 })?;
        pairs.push(sp);
    }
    Ok(Corpus { pair, pairs })
}

/// Loads a monolingual file (one segment per line, NFC, blank lines skipped).
pub fn load_monolingual(path: &Path) -> Result<Vec<String>> {
    Ok(read_lines(path)?
        .into_iter()
        .filter(|l| !l.trim().is_empty())
        .map(|l| nfc(&l))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Target-side language of the pair (the language being learned).
    pub language: LanguageCode,
    pub pair: LanguagePair,
    pub provenance: Provenance,
    pub count: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestTotal {
    pub language: LanguageCode,
    pub pair: LanguagePair,
    pub count: u64,
}

/// Per (pair, provenance) pair counts plus per-pair totals.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    counts: BTreeMap<(LanguagePair, Provenance), u64>,
}

impl Manifest {
    pub fn from_corpora<'a>(corpora: impl IntoIterator<Item = &'a Corpus>) -> Self {
        let mut m = Manifest::default();
        for c in corpora {
            for p in c.pairs() {
                *m.counts
                    .entry((p.pair.clone(), p.provenance.clone()))
                    .or_insert(0) += 1;
            }
        }
        m
    }

    pub fn add(&mut self, pair: LanguagePair, provenance: Provenance, count: u64) {
        *self.counts.entry((pair, provenance)).or_insert(0) += count;
    }

    pub fn combine(&mut self, other: &Manifest) {
        for ((pair, prov), n) in &other.counts {
            self.add(pair.clone(), prov.clone(), *n);
        }
    }

    pub fn count(&self, pair: &LanguagePair, provenance: &Provenance) -> u64 {
        self.counts
            .get(&(pair.clone(), provenance.clone()))
            .copied()
            .unwrap_or(0)
    }

    pub fn totals(&self) -> BTreeMap<LanguagePair, u64> {
        let mut totals = BTreeMap::new();
        for ((pair, _), n) in &self.counts {
            *totals.entry(pair.clone()).or_insert(0) += n;
        }
        totals
    }

    pub fn total(&self, pair: &LanguagePair) -> u64 {
        self.counts
            .iter()
            .filter(|((p, _), _)| p == pair)
            .map(|(_, n)| n)
            .sum()
    }

    pub fn grand_total(&self) -> u64 {
        self.counts.values().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn entries(&self) -> Vec<ManifestEntry> {
        self.counts
            .iter()
            .map(|((pair, prov), n)| ManifestEntry {
                language: pair.target.clone(),
                pair: pair.clone(),
                provenance: prov.clone(),
                count: *n,
            })
            .collect()
    }

    /// Keeps only the entries for which `keep` holds.
    pub fn filtered(&self, mut keep: impl FnMut(&LanguagePair, &Provenance) -> bool) -> Manifest {
        Manifest {
            counts: self
                .counts
                .iter()
                .filter(|((pair, prov), _)| keep(pair, prov))
                .map(|(k, v)| (k.clone(), *v))
                .collect(),
        }
    }

    /// True when the counts agree with the given corpora.
    pub fn matches(&self, corpora: &[&Corpus]) -> bool {
        *self == Manifest::from_corpora(corpora.iter().copied())
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestJson {
    entries: Vec<ManifestEntry>,
    totals: Vec<ManifestTotal>,
}

impl Serialize for Manifest {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        ManifestJson {
            entries: self.entries(),
            totals: self
                .totals()
                .into_iter()
                .map(|(pair, count)| ManifestTotal {
                    language: pair.target.clone(),
                    pair,
                    count,
                })
                .collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Manifest {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let json = ManifestJson::deserialize(d)?;
        let mut m = Manifest::default();
        for e in json.entries {
            m.add(e.pair, e.provenance, e.count);
        }
        for t in json.totals {
            if m.total(&t.pair) != t.count {
                return Err(serde::de::Error::custom(format!(
                    "manifest total for {} is {}, entries sum to {}",
                    t.pair,
                    t.count,
                    m.total(&t.pair)
                )));
            }
        }
        Ok(m)
    }
}

/// Concatenates corpora of one language pair, optionally dropping exact
/// duplicates (first occurrence wins, compared after NFC).
pub fn merge(corpora: &[Corpus], dedup: bool) -> Result<(Corpus, Manifest)> {
    let first = corpora.first().ok_or(CorpusError::NoCorpora)?;
    let pair = first.pair.clone();
    if let Some(bad) = corpora.iter().find(|c| c.pair != pair) {
        return Err(CorpusError::PairMismatch {
            expected: pair,
            found: bad.pair.clone(),
        });
    }
    let mut seen = HashSet::new();
    let mut pairs = Vec::with_capacity(corpora.iter().map(Corpus::len).sum());
    for c in corpora {
        for p in &c.pairs {
            if dedup && !seen.insert(p.key()) {
                continue;
            }
            pairs.push(p.clone());
        }
    }
    let merged = Corpus { pair, pairs };
    let manifest = Manifest::from_corpora([&merged]);
    Ok((merged, manifest))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusAudit {
    pub index: usize,
    pub pair: LanguagePair,
    pub provenance: Vec<Provenance>,
    pub size: usize,
    pub duplicates: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Overlap {
    pub a: usize,
    pub b: usize,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditReport {
    pub corpora: Vec<CorpusAudit>,
    pub duplicates: usize,
    pub overlaps: Vec<Overlap>,
}

impl AuditReport {
    /// Exact overlap between corpora `a` and `b` (order-insensitive).
    pub fn overlap(&self, a: usize, b: usize) -> usize {
        let (a, b) = if a <= b { (a, b) } else { (b, a) };
        self.overlaps
            .iter()
            .find(|o| o.a == a && o.b == b)
            .map_or(0, |o| o.count)
    }
}

/// Counts repeated pairs inside each corpus and distinct pairs shared by
/// every pair of corpora.
pub fn audit(corpora: &[Corpus]) -> AuditReport {
    let keysets: Vec<HashMap<(String, String), usize>> = corpora
        .iter()
        .map(|c| {
            let mut counts = HashMap::new();
            for p in &c.pairs {
                *counts.entry(p.key()).or_insert(0) += 1;
            }
            counts
        })
        .collect();
    let per_corpus: Vec<CorpusAudit> = corpora
        .iter()
        .zip(&keysets)
        .enumerate()
        .map(|(index, (c, keys))| {
            let mut provenance: Vec<Provenance> =
                c.pairs.iter().map(|p| p.provenance.clone()).collect();
            provenance.sort();
            provenance.dedup();
            CorpusAudit {
                index,
                pair: c.pair.clone(),
                provenance,
                size: c.len(),
                duplicates: c.len() - keys.len(),
            }
        })
        .collect();
    let mut overlaps = Vec::new();
    for a in 0..corpora.len() {
        for b in a + 1..corpora.len() {
            let (small, large) = if keysets[a].len() <= keysets[b].len() {
                (&keysets[a], &keysets[b])
            } else {
                (&keysets[b], &keysets[a])
            };
            let count = small.keys().filter(|k| large.contains_key(*k)).count();
            overlaps.push(Overlap { a, b, count });
        }
    }
    AuditReport {
        duplicates: per_corpus.iter().map(|c| c.duplicates).sum(),
        corpora: per_corpus,
        overlaps,
    }
}

/// Reads a two-column TSV of single characters (`from<TAB>to`). Blank lines
/// and lines starting with `#` are ignored.
pub fn read_char_tsv(path: &Path) -> Result<Vec<(char, char)>> {
    let label = path.display().to_string();
    let mut out = Vec::new();
    for (i, line) in read_lines(path)?.iter().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |reason: &str| CorpusError::Table {
            path: label.clone(),
            line: i + 1,
            reason: reason.to_string(),
        };
        let mut cols = line.split('\t');
        let (from, to) = match (cols.next(), cols.next(), cols.next()) {
            (Some(f), Some(t), None) => (f, t),
            _ => return Err(err("expected two tab-separated columns")),
        };
        let single = |s: &str| {
            let mut it = s.chars();
            match (it.next(), it.next()) {
                (Some(c), None) => Some(c),
                _ => None,
            }
        };
        match (single(from), single(to)) {
            (Some(f), Some(t)) => out.push((f, t)),
            _ => return Err(err("each column must hold exactly one character")),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn es_gn() -> LanguagePair {
        LanguagePair::parse("es-gn").unwrap()
    }

    fn corpus(texts: &[(&str, &str)]) -> Corpus {
        Corpus::from_texts(es_gn(), Provenance::Anlp23, texts.iter().copied()).unwrap()
    }

    #[test]
    fn loads_aligned_files() {
        let dir = tempdir().unwrap();
        let (s, t) = (dir.path().join("s.txt"), dir.path().join("t.txt"));
        fs::write(&s, "uno\ndos\ntres\n").unwrap();
        fs::write(&t, "peteĩ\nmokõi\nmbohapy\n").unwrap();
        let c = load_parallel(&s, &t, es_gn(), Provenance::Anlp23).unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(c.pairs()[1].target, "mokõi");
        assert!(c.pairs().iter().all(|p| p.provenance == Provenance::Anlp23));
    }

    #[test]
    fn misaligned_files_are_rejected() {
        let dir = tempdir().unwrap();
        let (s, t) = (dir.path().join("s.txt"), dir.path().join("t.txt"));
        fs::write(&s, "a\nb\nc\n").unwrap();
        fs::write(&t, "a\nb\n").unwrap();
        let err = load_parallel(&s, &t, es_gn(), Provenance::Anlp23).unwrap_err();
        assert!(matches!(
            err,
            CorpusError::AlignmentMismatch {
                src_lines: 3,
                tgt_lines: 2
            }
        ));
    }

    #[test]
    fn invalid_utf8_is_an_encoding_error() {
        let dir = tempdir().unwrap();
        let (s, t) = (dir.path().join("s.txt"), dir.path().join("t.txt"));
        fs::write(&s, b"ok\n\xff\xfe\n").unwrap();
        fs::write(&t, "a\nb\n").unwrap();
        let err = load_parallel(&s, &t, es_gn(), Provenance::Anlp23).unwrap_err();
        assert!(matches!(err, CorpusError::Encoding { offset: 3, .. }));
    }

    #[test]
    fn blank_segment_is_rejected() {
        let dir = tempdir().unwrap();
        let (s, t) = (dir.path().join("s.txt"), dir.path().join("t.txt"));
        fs::write(&s, "a\n  \n").unwrap();
        fs::write(&t, "a\nb\n").unwrap();
        let err = load_parallel(&s, &t, es_gn(), Provenance::Anlp23).unwrap_err();
        assert!(matches!(err, CorpusError::EmptySegment { line: 2 }));
    }

    #[test]
    fn load_applies_nfc() {
        let dir = tempdir().unwrap();
        let (s, t) = (dir.path().join("s.txt"), dir.path().join("t.txt"));
        // "n" + combining tilde
        fs::write(&s, "an\u{0303}o\n").unwrap();
        fs::write(&t, "ary\n").unwrap();
        let c = load_parallel(&s, &t, es_gn(), Provenance::Anlp23).unwrap();
        assert_eq!(c.pairs()[0].source, "año");
    }

    #[test]
    fn write_back_is_byte_identical_for_nfc_input() {
        let dir = tempdir().unwrap();
        let (s, t) = (dir.path().join("s.txt"), dir.path().join("t.txt"));
        let src = "¿Dónde está?\nla casa\n";
        let tgt = "Moõpa oĩ?\nóga\n";
        fs::write(&s, src).unwrap();
        fs::write(&t, tgt).unwrap();
        let c = load_parallel(&s, &t, es_gn(), Provenance::Anlp23).unwrap();
        let (s2, t2) = (dir.path().join("s2.txt"), dir.path().join("t2.txt"));
        c.write_parallel(&s2, &t2).unwrap();
        assert_eq!(fs::read(&s2).unwrap(), src.as_bytes());
        assert_eq!(fs::read(&t2).unwrap(), tgt.as_bytes());
    }

    #[test]
    fn audit_counts_duplicates_and_symmetric_overlap() {
        let a = corpus(&[("a", "x"), ("b", "y"), ("a", "x"), ("c", "z")]);
        let b = corpus(&[("b", "y"), ("c", "z"), ("d", "w")]);
        let c = corpus(&[("q", "q")]);
        let report = audit(&[a, b, c]);
        assert_eq!(report.corpora[0].duplicates, 1);
        assert_eq!(report.corpora[1].duplicates, 0);
        assert_eq!(report.duplicates, 1);
        assert_eq!(report.overlap(0, 1), 2);
        assert_eq!(report.overlap(1, 0), 2);
        assert_eq!(report.overlap(0, 2), 0);
    }

    #[test]
    fn audit_compares_after_nfc() {
        let a = corpus(&[("año", "x")]);
        let b = Corpus::from_texts(es_gn(), Provenance::Nllb, [("an\u{0303}o", "x")]).unwrap();
        assert_eq!(audit(&[a, b]).overlap(0, 1), 1);
    }

    #[test]
    fn merge_concatenates_and_counts() {
        let a = corpus(&[("1", "1"), ("2", "2"), ("3", "3"), ("4", "4"), ("5", "5")]);
        let texts: Vec<(String, String)> =
            (10..17).map(|i| (i.to_string(), i.to_string())).collect();
        let b = Corpus::from_texts(es_gn(), Provenance::Helsinki, texts).unwrap();
        let (merged, manifest) = merge(&[a, b], false).unwrap();
        assert_eq!(merged.len(), 12);
        assert_eq!(manifest.total(&es_gn()), 12);
        assert_eq!(manifest.count(&es_gn(), &Provenance::Anlp23), 5);
        assert_eq!(manifest.count(&es_gn(), &Provenance::Helsinki), 7);
        assert_eq!(merged.pairs()[5].provenance, Provenance::Helsinki);
    }

    #[test]
    fn merge_dedup_drops_overlap() {
        let a = corpus(&[("a", "x"), ("b", "y"), ("c", "z")]);
        let b = corpus(&[("b", "y"), ("c", "z"), ("d", "w"), ("e", "v")]);
        let (merged, manifest) = merge(&[a.clone(), b.clone()], true).unwrap();
        assert_eq!(merged.len(), 3 + 4 - 2);
        assert_eq!(manifest.grand_total(), 5);
        let (all, _) = merge(&[a, b], false).unwrap();
        assert_eq!(all.len(), 7);
    }

    #[test]
    fn merge_rejects_mixed_pairs() {
        let a = corpus(&[("a", "x")]);
        let b = Corpus::from_texts(
            LanguagePair::parse("es-quy").unwrap(),
            Provenance::Anlp23,
            [("a", "x")],
        )
        .unwrap();
        assert!(matches!(
            merge(&[a, b], false),
            Err(CorpusError::PairMismatch { .. })
        ));
        assert!(matches!(merge(&[], false), Err(CorpusError::NoCorpora)));
    }

    #[test]
    fn manifest_json_roundtrip_and_total_check() {
        let mut m = Manifest::default();
        let aym = LanguagePair::parse("es-aym").unwrap();
        m.add(aym.clone(), Provenance::Anlp23, 15_586);
        m.add(aym.clone(), Provenance::Helsinki, 149_225);
        m.add(aym.clone(), Provenance::Nllb, 8_809);
        let json = serde_json::to_string(&m).unwrap();
        assert!(json.contains("\"language\":\"aym\""));
        assert!(json.contains("\"provenance\":\"helsinki\""));
        let back: Manifest = serde_json::from_str(&json).unwrap();
        assert_eq!(back, m);
        let tampered = json.replace("173620", "173621");
        assert!(serde_json::from_str::<Manifest>(&tampered).is_err());
    }

    #[test]
    fn provenance_parsing() {
        assert_eq!("bibles".parse::<Provenance>().unwrap(), Provenance::Bibles);
        assert_eq!(
            "my_source".parse::<Provenance>().unwrap(),
            Provenance::Other("my_source".into())
        );
        assert!("".parse::<Provenance>().is_err());
        assert!("has space".parse::<Provenance>().is_err());
    }

    #[test]
    fn char_tsv_parsing() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("map.tsv");
        fs::write(&p, "# punctuation\n„\t\"\n«\t\"\n").unwrap();
        assert_eq!(read_char_tsv(&p).unwrap(), vec![('„', '"'), ('«', '"')]);
        fs::write(&p, "ab\tc\n").unwrap();
        assert!(matches!(
            read_char_tsv(&p),
            Err(CorpusError::Table { line: 1, .. })
        ));
    }
}
