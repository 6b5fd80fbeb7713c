use std::ops::Range;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::loss::label_smoothed_rows;
use super::optim::{clip_global_norm, lr_at};
use super::transformer::EncodedSource;
use super::transformer::DecoderState;
use super::{ModelError, Result};
use crate::codec::PAD;

/// Padded id matrices for one batch. Row `b` of `source` is valid for
/// `source_lens[b]` positions; `target_in`/`target_out` are the decoder
/// input (bos-prefixed) and the shifted labels, valid for `target_lens[b]`.
/// Everything past a row's length is padding and is never read.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub batch: usize,
    pub source_width: usize,
    pub target_width: usize,
    pub source: Vec<u32>,
    pub source_lens: Vec<usize>,
    pub target_in: Vec<u32>,
    pub target_out: Vec<u32>,
    pub target_lens: Vec<usize>,
}

impl Batch {
    /// Builds a batch from encoded `(source, target)` pairs where each target
    /// is `[bos, .., eos]`.
    pub fn from_sequences(pairs: &[(Vec<u32>, Vec<u32>)]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(ModelError::ShapeMismatch("empty batch".into()));
        }
        if let Some((s, t)) = pairs.iter().find(|(s, t)| s.is_empty() || t.len() < 2) {
            return Err(ModelError::ShapeMismatch(format!(
                "source length {} / target length {} too short",
                s.len(),
                t.len()
            )));
        }
        let batch = pairs.len();
        let source_width = pairs.iter().map(|p| p.0.len()).max().unwrap();
        let target_width = pairs.iter().map(|p| p.1.len() - 1).max().unwrap();
        let mut b = Batch {
            batch,
            source_width,
            target_width,
            source: vec![PAD; batch * source_width],
            source_lens: Vec::with_capacity(batch),
            target_in: vec![PAD; batch * target_width],
            target_out: vec![PAD; batch * target_width],
            target_lens: Vec::with_capacity(batch),
        };
        for (i, (s, t)) in pairs.iter().enumerate() {
            b.source[i * source_width..i * source_width + s.len()].copy_from_slice(s);
            let n = t.len() - 1;
            b.target_in[i * target_width..i * target_width + n].copy_from_slice(&t[..n]);
            b.target_out[i * target_width..i * target_width + n].copy_from_slice(&t[1..]);
            b.source_lens.push(s.len());
            b.target_lens.push(n);
        }
        Ok(b)
    }

    fn row(&self, i: usize) -> (&[u32], &[u32], &[u32]) {
        let s = &self.source[i * self.source_width..i * self.source_width + self.source_lens[i]];
        let t0 = i * self.target_width;
        let n = self.target_lens[i];
        (s, &self.target_in[t0..t0 + n], &self.target_out[t0..t0 + n])
    }

    fn check(&self) -> Result<()> {
        let ok = self.source.len() == self.batch * self.source_width
            && self.target_in.len() == self.batch * self.target_width
            && self.target_out.len() == self.batch * self.target_width
            && self.source_lens.len() == self.batch
            && self.target_lens.len() == self.batch
            && self.source_lens.iter().all(|&l| l >= 1 && l <= self.source_width)
            && self.target_lens.iter().all(|&l| l >= 1 && l <= self.target_width);
        if ok {
            Ok(())
        } else {
            Err(ModelError::ShapeMismatch("batch matrices and lengths disagree".into()))
        }
    }

    /// Label positions that count towards the loss.
    pub fn tokens(&self) -> usize {
        self.target_lens.iter().sum()
    }

    /// Labels with every padded position set to pad.
    pub fn masked_targets(&self) -> Vec<u32> {
        let mut out = vec![PAD; self.target_out.len()];
        for i in 0..self.batch {
            let (_, _, labels) = self.row(i);
            out[i * self.target_width..i * self.target_width + labels.len()].copy_from_slice(labels);
        }
        out
    }
}

/// `batch × len × vocab` logits; padded positions hold zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct Logits {
    pub batch: usize,
    pub len: usize,
    pub vocab: usize,
    pub data: Vec<f64>,
}

impl Logits {
    pub fn at(&self, b: usize, t: usize) -> &[f64] {
        let o = (b * self.len + t) * self.vocab;
        &self.data[o..o + self.vocab]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    /// Mean label-smoothed loss per target token.
    pub loss: f64,
    pub grad_norm: f64,
    pub clipped_norm: f64,
    pub lr: f64,
    pub tokens: usize,
}

/// Training-time view of a checkpoint.
pub type TrainState = Checkpoint;

struct SeqGrad {
    loss: f64,
    grad: Vec<f64>,
}

impl Checkpoint {
    /// Logits for every target position of `batch` (no dropout).
    pub fn forward(&self, batch: &Batch) -> Result<Logits> {
        batch.check()?;
        let v = self.arch().vocab_size();
        let mut data = vec![0.0; batch.batch * batch.target_width * v];
        for i in 0..batch.batch {
            let (src, tin, _) = batch.row(i);
            let (logits, _) = self.arch().forward_sequence(&self.params, src, tin, 0.0, None)?;
            let o = i * batch.target_width * v;
            data[o..o + logits.len()].copy_from_slice(&logits);
        }
        Ok(Logits {
            batch: batch.batch,
            len: batch.target_width,
            vocab: v,
            data,
        })
    }

    /// Mean label-smoothed loss over `batches` without updating anything.
    pub fn eval_loss(&self, batches: &[Batch]) -> Result<f64> {
        let eps = self.config.label_smoothing;
        let mut total = 0.0;
        let mut count = 0;
        for b in batches {
            let logits = self.forward(b)?;
            let (s, c) = label_smoothed_rows(&logits.data, &b.masked_targets(), logits.vocab, eps, PAD, None, 1.0);
            total += s;
            count += c;
        }
        Ok(if count == 0 { 0.0 } else { total / count as f64 })
    }

    /// Parameter ranges updated under the configured freeze scope.
    pub fn trainable_ranges(&self) -> Vec<Range<usize>> {
        let layers = self.shape().decoder_layers;
        self.arch()
            .tensors()
            .iter()
            .filter(|t| !self.config.freeze_scope.freezes(&t.name, layers))
            .map(|t| t.tensor.range())
            .collect()
    }

    /// Encodes a source for incremental decoding.
    pub fn encode(&self, src: &[u32]) -> Result<EncodedSource> {
        self.arch().encode(&self.params, src)
    }

    pub fn start(&self) -> DecoderState {
        self.arch().start_state()
    }

    /// Feeds `token` and returns next-token log-probabilities.
    pub fn advance(&self, enc: &EncodedSource, state: &mut DecoderState, token: u32) -> Vec<f64> {
        self.arch().step(&self.params, enc, state, token)
    }

    fn accumulate(&self, batches: &[Batch], seeds: Option<&[u64]>) -> Result<(f64, Vec<f64>, usize)> {
        if batches.is_empty() {
            return Err(ModelError::ShapeMismatch("no batches".into()));
        }
        let mut rows = Vec::new();
        for b in batches {
            b.check()?;
            for i in 0..b.batch {
                rows.push(b.row(i));
            }
        }
        let tokens: usize = rows.iter().map(|r| r.2.len()).sum();
        let scale = 1.0 / tokens as f64;
        let arch = self.arch();
        let params = &self.params;
        let (eps, v) = (self.config.label_smoothing, arch.vocab_size());
        let dropout = if seeds.is_some() { self.config.dropout } else { 0.0 };

        let per_seq: Vec<Result<SeqGrad>> = rows
            .par_iter()
            .enumerate()
            .map(|(i, &(src, tin, tout))| {
                let mut rng = ChaCha8Rng::seed_from_u64(seeds.map_or(0, |s| s[i]));
                let drop_rng = if dropout > 0.0 { Some(&mut rng) } else { None };
                let (logits, cache) = arch.forward_sequence(params, src, tin, dropout, drop_rng)?;
                let mut dlogits = vec![0.0; logits.len()];
                let (loss, _) = label_smoothed_rows(&logits, tout, v, eps, PAD, Some(&mut dlogits), scale);
                let mut grad = vec![0.0; params.len()];
                arch.backward(params, &mut grad, &cache, &dlogits);
                Ok(SeqGrad { loss, grad })
            })
            .collect();

        // fixed-order reduction keeps results independent of thread count
        let mut grad = vec![0.0; self.params.len()];
        let mut loss_sum = 0.0;
        for r in per_seq {
            let r = r?;
            loss_sum += r.loss;
            for (g, x) in grad.iter_mut().zip(&r.grad) {
                *g += x;
            }
        }
        Ok((loss_sum * scale, grad, tokens))
    }

    /// Mean loss over `batches` and its gradient with respect to every
    /// parameter, without dropout.
    pub fn loss_and_gradient(&self, batches: &[Batch]) -> Result<(f64, Vec<f64>)> {
        self.accumulate(batches, None).map(|(l, g, _)| (l, g))
    }

    /// One optimizer update from `batches` (gradient accumulation over all of
    /// them; normally `update_freq` batches). The loss is averaged over every
    /// non-pad label in the accumulated batches. On a non-finite loss the
    /// parameters are left untouched.
    pub fn train_step(&mut self, batches: &[Batch]) -> Result<StepMetrics> {
        let n: usize = batches.iter().map(|b| b.batch).sum();
        let seeds: Vec<u64> = (0..n).map(|_| self.rng.random::<u64>()).collect();
        let (loss, mut grad, tokens) = self.accumulate(batches, Some(&seeds))?;
        let step = self.step + 1;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(ModelError::NonFiniteLoss { step });
        }

        let trainable = self.trainable_ranges();
        let mut mask = vec![false; grad.len()];
        for r in &trainable {
            mask[r.clone()].fill(true);
        }
        for (g, keep) in grad.iter_mut().zip(&mask) {
            if !keep {
                *g = 0.0;
            }
        }
        let (grad_norm, clipped_norm) = clip_global_norm(&mut grad, self.config.clip_norm);
        let lr = lr_at(step, &self.config);
        let cfg = self.config.clone();
        self.adam.update(&mut self.params, &grad, &trainable, lr, step, &cfg);
        self.step = step;
        Ok(StepMetrics {
            step,
            loss,
            grad_norm,
            clipped_norm,
            lr,
            tokens,
        })
    }
}
