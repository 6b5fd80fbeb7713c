//! Beam search over one model or an ensemble of models.
//!
//! Scores are cumulative log-probabilities with no length normalization.
//! Every hypothesis ends in eos: eos is forced once `max_len` output tokens
//! have been produced. Equal scores are broken by the lexicographically
//! lowest token sequence.

use std::cmp::Ordering;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{CodecError, Vocabulary, BOS, EOS};
use crate::corpus::{czn_restore, CharTable, LanguageCode};
use crate::model::ops::log_sum_exp;
use crate::model::{Checkpoint, DecoderState, EncodedSource, ModelError};

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("ensemble has no members")]
    NoMembers,
    #[error("incompatible ensemble members: {0}")]
    IncompatibleMembers(String),
    #[error("invalid decoding spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DecodeError>;

/// Anything that yields next-token log-probabilities one token at a time.
pub trait StepModel: Sync {
    type Source: Sync;
    type Prefix: Clone + Send;

    fn vocab_size(&self) -> usize;
    /// Identifies the vocabulary; ensemble members must agree on it.
    fn vocab_fingerprint(&self) -> u64;
    /// Most tokens (bos included) the decoder accepts.
    fn max_prefix(&self) -> usize;
    fn encode(&self, src: &[u32]) -> Result<Self::Source>;
    fn start(&self, src: &Self::Source) -> Self::Prefix;
    /// Appends `token` to `prefix` and returns log-probabilities of the next.
    fn advance(&self, src: &Self::Source, prefix: &mut Self::Prefix, token: u32) -> Vec<f64>;
}

impl StepModel for Checkpoint {
    type Source = EncodedSource;
    type Prefix = DecoderState;

    fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    fn vocab_fingerprint(&self) -> u64 {
        self.vocab.fingerprint()
    }

    fn max_prefix(&self) -> usize {
        self.shape().max_positions
    }

    fn encode(&self, src: &[u32]) -> Result<EncodedSource> {
        Ok(Checkpoint::encode(self, src)?)
    }

    fn start(&self, _src: &EncodedSource) -> DecoderState {
        Checkpoint::start(self)
    }

    fn advance(&self, src: &EncodedSource, prefix: &mut DecoderState, token: u32) -> Vec<f64> {
        Checkpoint::advance(self, src, prefix, token)
    }
}

/// How member distributions are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combination {
    /// Mean of log-probabilities, renormalized.
    #[default]
    MeanLogProb,
    /// Log of the mean of probabilities.
    MeanProb,
}

/// Combines per-member log-probability vectors into one normalized
/// log-probability vector.
pub fn ensemble_step_logprobs(members: &[Vec<f64>], rule: Combination) -> Vec<f64> {
    let k = members.len();
    if k == 1 {
        return members[0].clone();
    }
    let v = members[0].len();
    let mut out = vec![0.0; v];
    match rule {
        Combination::MeanLogProb => {
            for m in members {
                for (o, x) in out.iter_mut().zip(m) {
                    *o += x;
                }
            }
            out.iter_mut().for_each(|o| *o /= k as f64);
        }
        Combination::MeanProb => {
            let mut col = vec![0.0; k];
            for (j, o) in out.iter_mut().enumerate() {
                for (c, m) in col.iter_mut().zip(members) {
                    *c = m[j];
                }
                *o = log_sum_exp(&col) - (k as f64).ln();
            }
        }
    }
    let lse = log_sum_exp(&out);
    out.iter_mut().for_each(|o| *o -= lse);
    out
}

/// K models decoded as one.
pub struct Ensemble<'a, M: StepModel> {
    members: Vec<&'a M>,
    rule: Combination,
}

impl<'a, M: StepModel> Ensemble<'a, M> {
    pub fn new(members: Vec<&'a M>, rule: Combination) -> Result<Self> {
        let first = members.first().ok_or(DecodeError::NoMembers)?;
        for (i, m) in members.iter().enumerate().skip(1) {
            if m.vocab_fingerprint() != first.vocab_fingerprint() || m.vocab_size() != first.vocab_size() {
                return Err(DecodeError::IncompatibleMembers(format!(
                    "member {i} uses a different vocabulary than member 0"
                )));
            }
        }
        Ok(Self { members, rule })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

impl<M: StepModel> StepModel for Ensemble<'_, M> {
    type Source = Vec<M::Source>;
    type Prefix = Vec<M::Prefix>;

    fn vocab_size(&self) -> usize {
        self.members[0].vocab_size()
    }

    fn vocab_fingerprint(&self) -> u64 {
        self.members[0].vocab_fingerprint()
    }

    fn max_prefix(&self) -> usize {
        self.members.iter().map(|m| m.max_prefix()).min().unwrap()
    }

    fn encode(&self, src: &[u32]) -> Result<Self::Source> {
        self.members.iter().map(|m| m.encode(src)).collect()
    }

    fn start(&self, src: &Self::Source) -> Self::Prefix {
        self.members.iter().zip(src).map(|(m, s)| m.start(s)).collect()
    }

    fn advance(&self, src: &Self::Source, prefix: &mut Self::Prefix, token: u32) -> Vec<f64> {
        let outs: Vec<Vec<f64>> = self
            .members
            .iter()
            .zip(src)
            .zip(prefix.iter_mut())
            .map(|((m, s), p)| m.advance(s, p, token))
            .collect();
        ensemble_step_logprobs(&outs, self.rule)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeamOptions {
    pub beam: usize,
    /// Output tokens before eos is forced.
    pub max_len: usize,
    /// Output tokens before eos is allowed.
    pub min_len: usize,
    pub bos: u32,
    pub eos: u32,
    /// Ids never emitted.
    pub banned: Vec<u32>,
}

impl BeamOptions {
    pub fn new(beam: usize, max_len: usize) -> Self {
        Self {
            beam,
            max_len,
            min_len: 0,
            bos: BOS,
            eos: EOS,
            banned: Vec::new(),
        }
    }

    /// Options for a real vocabulary: specials and tags banned, at least one
    /// output token.
    pub fn for_vocab(vocab: &Vocabulary, beam: usize, max_len: usize) -> Self {
        Self {
            min_len: 1,
            banned: vocab.non_output_ids(),
            ..Self::new(beam, max_len)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    /// Output tokens, eos excluded.
    pub tokens: Vec<u32>,
    /// Cumulative log-probability including eos.
    pub score: f64,
}

fn better(a: (f64, &[u32]), b: (f64, &[u32])) -> Ordering {
    b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then_with(|| a.1.cmp(b.1))
}

struct Live<P> {
    tokens: Vec<u32>,
    score: f64,
    prefix: P,
    next: Vec<f64>,
}

/// Beam search for one encoded source.
pub fn beam_search<M: StepModel>(model: &M, src: &[u32], opts: &BeamOptions) -> Result<Hypothesis> {
    if opts.beam == 0 {
        return Err(DecodeError::InvalidSpec("beam must be >= 1".into()));
    }
    let source = model.encode(src)?;
    let max_len = opts.max_len.min(model.max_prefix().saturating_sub(1)).max(opts.min_len);
    let v = model.vocab_size();
    let mut allowed = vec![true; v];
    for &b in &opts.banned {
        if (b as usize) < v {
            allowed[b as usize] = false;
        }
    }
    allowed[opts.eos as usize] = false;
    let allowed: Vec<u32> = (0..v as u32).filter(|&t| allowed[t as usize]).collect();

    let mut prefix = model.start(&source);
    let next = model.advance(&source, &mut prefix, opts.bos);
    let mut live = vec![Live {
        tokens: Vec::new(),
        score: 0.0,
        prefix,
        next,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for t in 0..=max_len {
        // (score, parent, token)
        let mut cands: Vec<(f64, usize, u32)> = Vec::new();
        for (i, h) in live.iter().enumerate() {
            if t >= opts.min_len {
                cands.push((h.score + h.next[opts.eos as usize], i, opts.eos));
            }
            if t < max_len {
                cands.extend(allowed.iter().map(|&tok| (h.score + h.next[tok as usize], i, tok)));
            }
        }
        // every live hypothesis has length t, so (parent tokens, token) order
        // is the lexicographic order of the extended sequences
        cands.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then_with(|| live[a.1].tokens.cmp(&live[b.1].tokens))
                .then_with(|| a.2.cmp(&b.2))
        });
        cands.truncate(opts.beam);

        let mut next_live = Vec::new();
        for c in &cands {
            let parent = &live[c.1];
            if c.2 == opts.eos {
                finished.push(Hypothesis {
                    tokens: parent.tokens.clone(),
                    score: c.0,
                });
            } else {
                let mut prefix = parent.prefix.clone();
                let next = model.advance(&source, &mut prefix, c.2);
                let mut tokens = parent.tokens.clone();
                tokens.push(c.2);
                next_live.push(Live {
                    tokens,
                    score: c.0,
                    prefix,
                    next,
                });
            }
        }
        live = next_live;
        let best_done = finished.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
        let best_live = live.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
        // log-probabilities never increase a score
        if live.is_empty() || best_done > best_live {
            break;
        }
    }
    finished.sort_by(|a, b| better((a.score, &a.tokens), (b.score, &b.tokens)));
    finished
        .into_iter()
        .next()
        .ok_or_else(|| DecodeError::InvalidSpec("no hypothesis finished".into()))
}

/// Argmax decoding (lowest id wins ties).
pub fn greedy<M: StepModel>(model: &M, src: &[u32], opts: &BeamOptions) -> Result<Hypothesis> {
    beam_search(model, src, &BeamOptions { beam: 1, ..opts.clone() })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthPolicy {
    /// Raw cumulative log-probability.
    #[default]
    None,
}

/// Checkpoints decoded together, as stored in JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub members: Vec<PathBuf>,
    #[serde(default)]
    pub combination: Combination,
    #[serde(default = "default_beam")]
    pub beam_size: usize,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    #[serde(default)]
    pub length_policy: LengthPolicy,
}

fn default_beam() -> usize {
    5
}

fn default_max_len() -> usize {
    200
}

impl EnsembleSpec {
    pub fn new(members: Vec<PathBuf>) -> Self {
        Self {
            members,
            combination: Combination::default(),
            beam_size: default_beam(),
            max_len: default_max_len(),
            length_policy: LengthPolicy::None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.members.is_empty() {
            return Err(DecodeError::NoMembers);
        }
        if self.beam_size == 0 || self.max_len == 0 {
            return Err(DecodeError::InvalidSpec("beam_size and max_len must be >= 1".into()));
        }
        Ok(())
    }

    /// Loads every member checkpoint and checks they share a vocabulary.
    pub fn load(&self) -> Result<Vec<Checkpoint>> {
        self.validate()?;
        let members: Vec<Checkpoint> = self
            .members
            .iter()
            .map(|p| Checkpoint::load(p))
            .collect::<std::result::Result<_, _>>()?;
        let fp = members[0].vocab.fingerprint();
        if let Some((i, _)) = members.iter().enumerate().find(|(_, m)| m.vocab.fingerprint() != fp) {
            return Err(DecodeError::IncompatibleMembers(format!(
                "{} has a different vocabulary than {}",
                self.members[i].display(),
                self.members[0].display()
            )));
        }
        Ok(members)
    }

    pub fn read(path: &std::path::Path) -> Result<Self> {
        let spec: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentError {
    pub index: usize,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Translations {
    /// One per input, in input order; failed segments hold an empty string.
    pub hypotheses: Vec<String>,
    pub errors: Vec<SegmentError>,
}

/// Translates every source segment into `target`. Segments are independent
/// and decoded in parallel; a failing segment yields an empty placeholder
/// and an entry in `errors`. With a `czn` target and a `czn_table`, word-
/// final tone digits are restored to superscripts.
pub fn translate_corpus<M: StepModel>(
    model: &M,
    vocab: &Vocabulary,
    sources: &[String],
    target: &LanguageCode,
    beam: usize,
    max_len: usize,
    czn_table: Option<&CharTable>,
) -> Translations {
    let opts = BeamOptions::for_vocab(vocab, beam, max_len);
    let restore = if target.as_str() == "czn" { czn_table } else { None };
    let results: Vec<std::result::Result<String, String>> = sources
        .par_iter()
        .map(|text| {
            let src = vocab.encode_source(text, target).map_err(|e| e.to_string())?;
            let hyp = beam_search(model, &src, &opts).map_err(|e| e.to_string())?;
            let out = vocab.decode_ids(&hyp.tokens).map_err(|e| e.to_string())?;
            Ok(match restore {
                Some(table) => czn_restore(&out, table),
                None => out,
            })
        })
        .collect();
    let mut out = Translations::default();
    for (index, r) in results.into_iter().enumerate() {
        match r {
            Ok(h) => out.hypotheses.push(h),
            Err(message) => {
                out.hypotheses.push(String::new());
                out.errors.push(SegmentError { index, message });
            }
        }
    }
    out
}
