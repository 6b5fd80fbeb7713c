//! Model + optimizer state and its on-disk format.
//!
//! File layout: the 8-byte magic `LRMTCKPT`, a little-endian `u32` format
//! version, a little-endian `u64` header length, a JSON header, then raw
//! little-endian `f64` tensor payloads. The header carries the shape, the
//! config, the vocabulary and its fingerprint, the step counter, the RNG
//! position and a tensor directory (name, shape, dtype, byte offset relative
//! to the start of the payload).

use std::io::{Read, Write};
use std::path::Path;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::config::{TrainConfig, TransformerShape};
use super::optim::Adam;
use super::transformer::{TensorInfo, TensorKind, Transformer};
use super::{ModelError, Result};
use crate::codec::Vocabulary;

const MAGIC: &[u8; 8] = b"LRMTCKPT";
const FORMAT_VERSION: u32 = 1;

/// Absolute bound on any freshly initialized parameter.
pub const INIT_BOUND: f64 = 1.0;

/// Serializable position of a ChaCha generator.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// u128 as decimal text; JSON numbers cannot hold it.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> std::result::Result<ChaCha8Rng, String> {
        if self.seed.len() != 64 {
            return Err("rng seed must be 64 hex digits".into());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|e| e.to_string())?;
        }
        let pos: u128 = self.word_pos.parse().map_err(|e: std::num::ParseIntError| e.to_string())?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

/// How rows added by [`extend_embeddings`] are initialized.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum InitPolicy {
    /// Mean of the existing rows plus uniform noise in `[-noise, noise]`.
    MeanPlusNoise { noise: f64, seed: u64 },
}

impl Default for InitPolicy {
    fn default() -> Self {
        InitPolicy::MeanPlusNoise { noise: 0.01, seed: 0 }
    }
}

/// Parameters, Adam moments, step counter, training RNG, config and the
/// vocabulary the embedding rows refer to.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub vocab: Vocabulary,
    pub params: Vec<f64>,
    pub adam: Adam,
    pub step: u64,
    pub rng: ChaCha8Rng,
    /// Free-form run metadata echoed into the header.
    pub meta: serde_json::Map<String, Value>,
    arch: Transformer,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    dtype: String,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    shape: TransformerShape,
    config: TrainConfig,
    vocab: Vocabulary,
    vocab_fingerprint: String,
    step: u64,
    rng: RngState,
    tensors: Vec<TensorEntry>,
    meta: serde_json::Map<String, Value>,
}

fn init_bound(info: &TensorInfo) -> f64 {
    match info.kind {
        TensorKind::Embedding => (3.0 / info.tensor.cols as f64).sqrt(),
        TensorKind::Weight => (6.0 / (info.tensor.rows + info.tensor.cols) as f64).sqrt(),
        TensorKind::Bias | TensorKind::NormGain | TensorKind::NormBias => 0.0,
    }
}

fn training_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

/// Seeded random initialization: uniform Xavier weights, embeddings uniform
/// with variance 1/d, zero biases, unit norm gains. Every value lies within
/// [`INIT_BOUND`].
pub fn init_random(shape: TransformerShape, vocab: &Vocabulary, config: TrainConfig, seed: u64) -> Result<Checkpoint> {
    config.validate()?;
    let arch = Transformer::new(shape, vocab.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = vec![0.0; arch.num_params()];
    for info in arch.tensors() {
        let slot = &mut params[info.tensor.range()];
        match info.kind {
            TensorKind::NormGain => slot.fill(1.0),
            TensorKind::Bias | TensorKind::NormBias => {}
            _ => {
                let b = init_bound(info).min(INIT_BOUND);
                for x in slot.iter_mut() {
                    *x = rng.random_range(-b..=b);
                }
            }
        }
    }
    let n = params.len();
    Ok(Checkpoint {
        rng: training_rng(config.seed),
        config,
        vocab: vocab.clone(),
        params,
        adam: Adam::new(n),
        step: 0,
        meta: Default::default(),
        arch,
    })
}

/// Grows the embedding matrix to `new_vocab`, which must extend the
/// checkpoint's vocabulary. Existing rows and every other tensor are copied
/// unchanged; optimizer moments of new rows start at zero.
pub fn extend_embeddings(ckpt: &Checkpoint, new_vocab: &Vocabulary, policy: InitPolicy) -> Result<Checkpoint> {
    if !new_vocab.extends(&ckpt.vocab) {
        return Err(ModelError::IncompatibleVocab(format!(
            "vocabulary {} does not extend {}",
            new_vocab.fingerprint_hex(),
            ckpt.vocab.fingerprint_hex()
        )));
    }
    let arch = Transformer::new(*ckpt.arch.shape(), new_vocab.len())?;
    let n = arch.num_params();
    let mut params = vec![0.0; n];
    let mut adam = Adam::new(n);
    for info in arch.tensors() {
        let old = ckpt.arch.tensor(&info.name).expect("same layout").tensor;
        let dst = info.tensor.offset..info.tensor.offset + old.len();
        params[dst.clone()].copy_from_slice(&ckpt.params[old.range()]);
        adam.m[dst.clone()].copy_from_slice(&ckpt.adam.m[old.range()]);
        adam.v[dst].copy_from_slice(&ckpt.adam.v[old.range()]);
    }
    let embed = arch.embedding();
    let d = embed.cols;
    let old_rows = ckpt.vocab.len();
    let mut mean = vec![0.0; d];
    for r in 0..old_rows {
        for j in 0..d {
            mean[j] += params[embed.offset + r * d + j];
        }
    }
    mean.iter_mut().for_each(|m| *m /= old_rows as f64);
    let InitPolicy::MeanPlusNoise { noise, seed } = policy;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for r in old_rows..new_vocab.len() {
        for j in 0..d {
            let eps = if noise > 0.0 { rng.random_range(-noise..=noise) } else { 0.0 };
            params[embed.offset + r * d + j] = mean[j] + eps;
        }
    }
    Ok(Checkpoint {
        config: ckpt.config.clone(),
        vocab: new_vocab.clone(),
        params,
        adam,
        step: ckpt.step,
        rng: ckpt.rng.clone(),
        meta: ckpt.meta.clone(),
        arch,
    })
}

fn malformed(path: &Path, reason: impl Into<String>) -> ModelError {
    ModelError::Checkpoint {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

impl Checkpoint {
    pub fn arch(&self) -> &Transformer {
        &self.arch
    }

    pub fn shape(&self) -> &TransformerShape {
        self.arch.shape()
    }

    /// Parameter slice of the named tensor.
    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.arch.tensor(name).map(|t| &self.params[t.tensor.range()])
    }

    /// Restarts optimizer moments, step counter and training RNG, keeping
    /// the parameters (fine-tuning from a trained model).
    pub fn reset_training(&mut self, config: TrainConfig) -> Result<()> {
        config.validate()?;
        self.adam = Adam::new(self.params.len());
        self.step = 0;
        self.rng = training_rng(config.seed);
        self.config = config;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries = Vec::new();
        let mut offset = 0u64;
        for prefix in ["param", "adam_m", "adam_v"] {
            for info in self.arch.tensors() {
                entries.push(TensorEntry {
                    name: format!("{prefix}/{}", info.name),
                    shape: [info.tensor.rows, info.tensor.cols],
                    dtype: "f64".into(),
                    offset,
                });
                offset += info.tensor.len() as u64 * 8;
            }
        }
        let header = Header {
            shape: *self.arch.shape(),
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            vocab_fingerprint: self.vocab.fingerprint_hex(),
            step: self.step,
            rng: RngState::capture(&self.rng),
            tensors: entries,
            meta: self.meta.clone(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut buf = Vec::with_capacity(20 + header.len() + offset as usize);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
        buf.extend_from_slice(&header);
        for store in [&self.params, &self.adam.m, &self.adam.v] {
            for info in self.arch.tensors() {
                for x in &store[info.tensor.range()] {
                    buf.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        // write-then-rename so an interrupted save never leaves a torn file
        let tmp = path.with_extension("ckpt.tmp");
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(malformed(path, "bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(malformed(path, format!("unsupported format version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let payload_start = 20usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| malformed(path, "truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[20..payload_start])?;
        if header.vocab.fingerprint_hex() != header.vocab_fingerprint {
            return Err(ModelError::IncompatibleVocab(format!(
                "{}: embedded vocabulary does not match its fingerprint",
                path.display()
            )));
        }
        let arch = Transformer::new(header.shape, header.vocab.len())?;
        let n = arch.num_params();
        let mut stores = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
        let payload = &bytes[payload_start..];
        for entry in &header.tensors {
            let (prefix, name) = entry
                .name
                .split_once('/')
                .ok_or_else(|| malformed(path, format!("bad tensor name {}", entry.name)))?;
            let which = match prefix {
                "param" => 0,
                "adam_m" => 1,
                "adam_v" => 2,
                _ => return Err(malformed(path, format!("unknown tensor group {prefix}"))),
            };
            let info = arch
                .tensor(name)
                .ok_or_else(|| malformed(path, format!("unknown tensor {name}")))?;
            if entry.dtype != "f64" || entry.shape != [info.tensor.rows, info.tensor.cols] {
                return Err(malformed(path, format!("tensor {} has wrong shape or dtype", entry.name)));
            }
            let start = entry.offset as usize;
            let end = start + info.tensor.len() * 8;
            if end > payload.len() {
                return Err(malformed(path, format!("tensor {} truncated", entry.name)));
            }
            let dst = &mut stores[which][info.tensor.range()];
            for (x, chunk) in dst.iter_mut().zip(payload[start..end].chunks_exact(8)) {
                *x = f64::from_le_bytes(chunk.try_into().unwrap());
            }
        }
        if header.tensors.len() != 3 * arch.tensors().len() {
            return Err(malformed(path, "tensor directory incomplete"));
        }
        let rng = header.rng.restore().map_err(|e| malformed(path, e))?;
        let [params, m, v] = stores;
        Ok(Checkpoint {
            config: header.config,
            vocab: header.vocab,
            params,
            adam: Adam { m, v },
            step: header.step,
            rng,
            meta: header.meta,
            arch,
        })
    }

    /// Loads and checks that the embedded vocabulary is `expected`.
    pub fn load_expecting(path: &Path, expected: &Vocabulary) -> Result<Self> {
        let ckpt = Self::load(path)?;
        if ckpt.vocab.fingerprint() != expected.fingerprint() {
            return Err(ModelError::IncompatibleVocab(format!(
                "{} was trained with vocabulary {}, expected {}",
                path.display(),
                ckpt.vocab.fingerprint_hex(),
                expected.fingerprint_hex()
            )));
        }
        Ok(ckpt)
    }
}
