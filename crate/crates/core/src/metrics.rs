//! chrF scoring with the semantics of the reference tool at signature
//! `nrefs:1|case:mixed|eff:yes|nc:6|nw:0|space:no`.
//!
//! Per order n the scorer keeps hypothesis, reference and matched n-gram
//! counts. Corpus scores sum those counts over segments before computing the
//! final F-score once. With effective order, precision and recall are
//! averaged only over orders where both sides have n-grams, and the F-beta
//! combination is applied to the averages.

use std::collections::{BTreeMap, HashMap};
use std::ops::{Add, AddAssign};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::LanguageCode;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("{hyps} hypotheses but {refs} references")]
    LengthMismatch { hyps: usize, refs: usize },
    #[error("no languages selected for the mean")]
    EmptySet,
    #[error("no score for language {0}")]
    UnknownLanguage(LanguageCode),
    #[error("invalid chrF parameters: {0}")]
    InvalidParams(&'static str),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChrfParams {
    pub char_order: usize,
    pub word_order: usize,
    pub beta: f64,
    pub remove_whitespace: bool,
    pub lowercase: bool,
    pub effective_order: bool,
}

impl Default for ChrfParams {
    fn default() -> Self {
        Self {
            char_order: 6,
            word_order: 0,
            beta: 2.0,
            remove_whitespace: true,
            lowercase: false,
            effective_order: true,
        }
    }
}

impl ChrfParams {
    pub fn validate(&self) -> Result<(), MetricsError> {
        if self.char_order == 0 {
            return Err(MetricsError::InvalidParams("char_order must be >= 1"));
        }
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(MetricsError::InvalidParams("beta must be positive"));
        }
        Ok(())
    }

    pub fn signature(&self) -> String {
        format!(
            "nrefs:1|case:{}|eff:{}|nc:{}|nw:{}|space:{}|version:{}",
            if self.lowercase { "lc" } else { "mixed" },
            if self.effective_order { "yes" } else { "no" },
            self.char_order,
            self.word_order,
            if self.remove_whitespace { "no" } else { "yes" },
            env!("CARGO_PKG_VERSION"),
        )
    }

    fn total_orders(&self) -> usize {
        self.char_order + self.word_order
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrderStats {
    pub hyp: u64,
    #[serde(rename = "ref")]
    pub reference: u64,
    pub matched: u64,
}

/// Per-order counts; character orders first, then word orders.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NgramStats {
    pub orders: Vec<OrderStats>,
}

impl NgramStats {
    pub fn zeros(orders: usize) -> Self {
        Self {
            orders: vec![OrderStats::default(); orders],
        }
    }
}

impl AddAssign<&NgramStats> for NgramStats {
    fn add_assign(&mut self, rhs: &NgramStats) {
        if self.orders.len() < rhs.orders.len() {
            self.orders.resize(rhs.orders.len(), OrderStats::default());
        }
        for (a, b) in self.orders.iter_mut().zip(&rhs.orders) {
            a.hyp += b.hyp;
            a.reference += b.reference;
            a.matched += b.matched;
        }
    }
}

impl Add for NgramStats {
    type Output = NgramStats;

    fn add(mut self, rhs: NgramStats) -> NgramStats {
        self += &rhs;
        self
    }
}

/// Python's `str.split()` whitespace, which the reference tool uses.
fn is_split_space(c: char) -> bool {
    c.is_whitespace() || ('\u{1c}'..='\u{1f}').contains(&c)
}

fn prepare(text: &str, params: &ChrfParams) -> Vec<char> {
    let text = if params.lowercase {
        text.to_lowercase()
    } else {
        text.to_string()
    };
    if params.remove_whitespace {
        text.chars().filter(|c| !is_split_space(*c)).collect()
    } else {
        text.chars().collect()
    }
}

fn char_ngrams(chars: &[char], n: usize) -> HashMap<&[char], u64> {
    let mut counts = HashMap::new();
    if chars.len() >= n {
        for w in chars.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Splits punctuation off word edges the way chrF++ does.
fn words_for_ngrams(text: &str) -> Vec<String> {
    const PUNCT: &str = "!\"#$%&'()*+,-./:;<=>?@[\\]^_`{|}~";
    let mut out = Vec::new();
    for w in text.split(is_split_space).filter(|w| !w.is_empty()) {
        let chars: Vec<char> = w.chars().collect();
        if chars.len() == 1 {
            out.push(w.to_string());
        } else if PUNCT.contains(chars[chars.len() - 1]) {
            out.push(chars[..chars.len() - 1].iter().collect());
            out.push(chars[chars.len() - 1].to_string());
        } else if PUNCT.contains(chars[0]) {
            out.push(chars[0].to_string());
            out.push(chars[1..].iter().collect());
        } else {
            out.push(w.to_string());
        }
    }
    out
}

fn word_ngrams(words: &[String], n: usize) -> HashMap<&[String], u64> {
    let mut counts = HashMap::new();
    if words.len() >= n {
        for w in words.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

fn match_stats<K: std::hash::Hash + Eq>(hyp: &HashMap<K, u64>, reference: &HashMap<K, u64>) -> OrderStats {
    let mut matched = 0;
    let mut hyp_total = 0;
    for (g, n) in hyp {
        hyp_total += n;
        if let Some(r) = reference.get(g) {
            matched += (*n).min(*r);
        }
    }
    OrderStats {
        // no hypothesis n-grams count against an order the reference lacks
        hyp: if reference.is_empty() { 0 } else { hyp_total },
        reference: reference.values().sum(),
        matched,
    }
}

/// Character n-gram multisets for orders `1..=char_order`, keyed by the
/// n-gram text.
pub fn ngram_profile(text: &str, params: &ChrfParams) -> Vec<BTreeMap<String, u64>> {
    let chars = prepare(text, params);
    (1..=params.char_order)
        .map(|n| {
            char_ngrams(&chars, n)
                .into_iter()
                .map(|(g, c)| (g.iter().collect(), c))
                .collect()
        })
        .collect()
}

/// Match statistics for one hypothesis/reference pair.
pub fn segment_stats(hyp: &str, reference: &str, params: &ChrfParams) -> NgramStats {
    let h = prepare(hyp, params);
    let r = prepare(reference, params);
    let mut orders = Vec::with_capacity(params.total_orders());
    for n in 1..=params.char_order {
        orders.push(match_stats(&char_ngrams(&h, n), &char_ngrams(&r, n)));
    }
    if params.word_order > 0 {
        let case = |s: &str| if params.lowercase { s.to_lowercase() } else { s.to_string() };
        let hw = words_for_ngrams(&case(hyp));
        let rw = words_for_ngrams(&case(reference));
        for n in 1..=params.word_order {
            orders.push(match_stats(&word_ngrams(&hw, n), &word_ngrams(&rw, n)));
        }
    }
    NgramStats { orders }
}

/// Final chrF in [0, 100] from (possibly aggregated) statistics.
pub fn f_score(stats: &NgramStats, params: &ChrfParams) -> f64 {
    const EPS: f64 = 1e-16;
    let factor = params.beta * params.beta;
    let mut eps_sum = 0.0;
    let mut avg_p = 0.0;
    let mut avg_r = 0.0;
    let mut effective = 0usize;
    for o in &stats.orders {
        let p = if o.hyp > 0 {
            o.matched as f64 / o.hyp as f64
        } else {
            EPS
        };
        let r = if o.reference > 0 {
            o.matched as f64 / o.reference as f64
        } else {
            EPS
        };
        let denom = factor * p + r;
        eps_sum += if denom > 0.0 {
            (1.0 + factor) * p * r / denom
        } else {
            EPS
        };
        if o.hyp > 0 && o.reference > 0 {
            avg_p += p;
            avg_r += r;
            effective += 1;
        }
    }
    if !params.effective_order {
        return 100.0 * eps_sum / stats.orders.len().max(1) as f64;
    }
    if effective == 0 {
        return 0.0;
    }
    avg_p /= effective as f64;
    avg_r /= effective as f64;
    if avg_p + avg_r == 0.0 {
        return 0.0;
    }
    100.0 * (1.0 + factor) * avg_p * avg_r / (factor * avg_p + avg_r)
}

pub fn sentence_chrf(hyp: &str, reference: &str, params: &ChrfParams) -> f64 {
    f_score(&segment_stats(hyp, reference, params), params)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    #[serde(serialize_with = "crate::report::chrf4")]
    pub score: f64,
    pub params: ChrfParams,
    pub signature: String,
    pub segments: usize,
}

/// Aggregate statistics over every segment, then score once.
pub fn corpus_stats<H, R>(hyps: &[H], refs: &[R], params: &ChrfParams) -> Result<NgramStats, MetricsError>
where
    H: AsRef<str> + Sync,
    R: AsRef<str> + Sync,
{
    if hyps.len() != refs.len() {
        return Err(MetricsError::LengthMismatch {
            hyps: hyps.len(),
            refs: refs.len(),
        });
    }
    let orders = params.total_orders();
    Ok(hyps
        .par_iter()
        .zip(refs.par_iter())
        .map(|(h, r)| segment_stats(h.as_ref(), r.as_ref(), params))
        .reduce(|| NgramStats::zeros(orders), |a, b| a + b))
}

pub fn corpus_chrf<H, R>(hyps: &[H], refs: &[R], params: &ChrfParams) -> Result<ScoreReport, MetricsError>
where
    H: AsRef<str> + Sync,
    R: AsRef<str> + Sync,
{
    params.validate()?;
    let stats = corpus_stats(hyps, refs, params)?;
    Ok(ScoreReport {
        score: f_score(&stats, params),
        params: params.clone(),
        signature: params.signature(),
        segments: hyps.len(),
    })
}

/// Unweighted mean over the `include` languages.
pub fn macro_mean(scores: &BTreeMap<LanguageCode, f64>, include: &[LanguageCode]) -> Result<f64, MetricsError> {
    if include.is_empty() {
        return Err(MetricsError::EmptySet);
    }
    let mut sum = 0.0;
    for lang in include {
        sum += scores
            .get(lang)
            .ok_or_else(|| MetricsError::UnknownLanguage(lang.clone()))?;
    }
    Ok(sum / include.len() as f64)
}

/// Mean over every language in `scores`.
pub fn macro_mean_all(scores: &BTreeMap<LanguageCode, f64>) -> Result<f64, MetricsError> {
    let langs: Vec<LanguageCode> = scores.keys().cloned().collect();
    macro_mean(scores, &langs)
}
