//! Temperature-based language-pair sampling. One pair is drawn per batch;
//! examples are then drawn uniformly with replacement from that pair.

use std::collections::BTreeMap;

use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, LanguagePair, Manifest, SentencePair};

#[derive(Debug, Error, PartialEq)]
pub enum SamplerError {
    #[error("manifest has no language pairs")]
    EmptyManifest,
    #[error("language pair {0} has no examples")]
    ZeroSize(LanguagePair),
    #[error("temperature must be positive and finite, got {0}")]
    InvalidTemperature(f64),
    #[error("no corpus for language pair {0}")]
    MissingCorpus(LanguagePair),
    #[error("batch size must be >= 1")]
    EmptyBatch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairWeight {
    pub pair: LanguagePair,
    pub size: u64,
    pub probability: f64,
}

/// p_l = n_l^(1/T) / Σ_k n_k^(1/T), ordered by language pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairDistribution {
    pub temperature: f64,
    pub pairs: Vec<PairWeight>,
}

impl PairDistribution {
    pub fn from_sizes(sizes: &BTreeMap<LanguagePair, u64>, temperature: f64) -> Result<Self, SamplerError> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(SamplerError::InvalidTemperature(temperature));
        }
        if sizes.is_empty() {
            return Err(SamplerError::EmptyManifest);
        }
        if let Some((pair, _)) = sizes.iter().find(|(_, &n)| n == 0) {
            return Err(SamplerError::ZeroSize(pair.clone()));
        }
        // log space keeps n^(1/T) finite for any T
        let logw: Vec<f64> = sizes.values().map(|&n| (n as f64).ln() / temperature).collect();
        let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logw.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = w.iter().sum();
        let pairs = sizes
            .iter()
            .zip(w)
            .map(|((pair, &size), w)| PairWeight {
                pair: pair.clone(),
                size,
                probability: w / total,
            })
            .collect();
        Ok(Self { temperature, pairs })
    }

    pub fn probability(&self, pair: &LanguagePair) -> Option<f64> {
        self.pairs.iter().find(|w| &w.pair == pair).map(|w| w.probability)
    }

    /// Draws one pair by inverse CDF.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> &LanguagePair {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for w in &self.pairs {
            acc += w.probability;
            if u < acc {
                return &w.pair;
            }
        }
        &self.pairs.last().expect("distribution is nonempty").pair
    }
}

pub fn pair_distribution(manifest: &Manifest, temperature: f64) -> Result<PairDistribution, SamplerError> {
    PairDistribution::from_sizes(&manifest.totals(), temperature)
}

/// Draws one language pair from `dist`, then `batch_size` examples uniformly
/// with replacement from that pair's corpus.
pub fn draw_batch<'a>(
    rng: &mut ChaCha8Rng,
    corpora: &'a BTreeMap<LanguagePair, Corpus>,
    dist: &PairDistribution,
    batch_size: usize,
) -> Result<(LanguagePair, Vec<&'a SentencePair>), SamplerError> {
    if batch_size == 0 {
        return Err(SamplerError::EmptyBatch);
    }
    if let Some(w) = dist
        .pairs
        .iter()
        .find(|w| corpora.get(&w.pair).is_none_or(|c| c.is_empty()))
    {
        return Err(SamplerError::MissingCorpus(w.pair.clone()));
    }
    let pair = dist.sample(rng).clone();
    let corpus = &corpora[&pair];
    let items = (0..batch_size)
        .map(|_| &corpus.pairs()[rng.random_range(0..corpus.len())])
        .collect();
    Ok((pair, items))
}
