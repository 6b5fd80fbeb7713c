use serde::{Deserialize, Serialize};

use super::ModelError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    InverseSqrt,
}

/// Which parameters are held fixed during training. The named scope is the
/// frozen part; everything else is updated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "scope", content = "layers")]
pub enum FreezeScope {
    #[default]
    None,
    /// Every `decoder.*` tensor.
    DecoderOnly,
    /// The last `k` decoder layers.
    LastKDecoderLayers(usize),
}

impl FreezeScope {
    pub fn freezes(&self, tensor: &str, decoder_layers: usize) -> bool {
        match *self {
            FreezeScope::None => false,
            FreezeScope::DecoderOnly => tensor.starts_with("decoder."),
            FreezeScope::LastKDecoderLayers(k) => tensor
                .strip_prefix("decoder.layers.")
                .and_then(|rest| rest.split('.').next())
                .and_then(|i| i.parse::<usize>().ok())
                .is_some_and(|i| i + k >= decoder_layers),
        }
    }
}

/// Training hyperparameters. `Default` reproduces the published fine-tuning
/// setup; [`TrainConfig::desk`] scales it down for CPU runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub update_freq: usize,
    pub max_lr: f64,
    pub schedule: Schedule,
    pub warmup_steps: u64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub label_smoothing: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub clip_norm: f64,
    pub pair_temperature: f64,
    pub max_updates: u64,
    pub valid_freq: u64,
    pub beam_size: usize,
    pub seed: u64,
    pub freeze_scope: FreezeScope,
    /// Deviations from the defaults above, recorded in run metadata.
    pub overrides: Vec<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            update_freq: 1,
            max_lr: 0.01,
            schedule: Schedule::InverseSqrt,
            warmup_steps: 10_000,
            adam_betas: (0.9, 0.98),
            adam_eps: 1e-8,
            label_smoothing: 0.1,
            weight_decay: 0.0001,
            dropout: 0.3,
            clip_norm: 1e-6,
            pair_temperature: 3.0,
            max_updates: 1_000_000,
            valid_freq: 40_000,
            beam_size: 5,
            seed: 1,
            freeze_scope: FreezeScope::None,
            overrides: Vec::new(),
        }
    }
}

impl TrainConfig {
    /// CPU-sized profile for `max_updates` updates. Warmup is a tenth of the
    /// run and validation happens five times; the scale factor against the
    /// full schedule and every overridden default are listed in `overrides`.
    pub fn desk(max_updates: u64) -> Self {
        let full = Self::default();
        let scale = max_updates as f64 / full.max_updates as f64;
        let mut cfg = Self {
            max_updates,
            warmup_steps: (max_updates / 10).max(1),
            valid_freq: (max_updates / 5).max(1),
            batch_size: 24,
            max_lr: 5e-3,
            clip_norm: 1.0,
            dropout: 0.1,
            ..full
        };
        cfg.overrides = vec![
            format!("scale={scale}"),
            format!("warmup_steps={}", cfg.warmup_steps),
            format!("valid_freq={}", cfg.valid_freq),
            "batch_size=24".into(),
            "max_lr=0.005".into(),
            "clip_norm=1.0".into(),
            "dropout=0.1".into(),
        ];
        cfg
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.batch_size == 0 || self.update_freq == 0 {
            return bad("batch_size and update_freq must be >= 1");
        }
        if !(self.max_lr > 0.0) || !(self.clip_norm > 0.0) || !(self.pair_temperature > 0.0) {
            return bad("max_lr, clip_norm and pair_temperature must be positive");
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad("label_smoothing must be in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if self.weight_decay < 0.0 || !(self.adam_eps > 0.0) {
            return bad("weight_decay must be >= 0 and adam_eps > 0");
        }
        let (b1, b2) = self.adam_betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return bad("adam betas must be in [0, 1)");
        }
        if self.warmup_steps == 0 || self.valid_freq == 0 || self.beam_size == 0 {
            return bad("warmup_steps, valid_freq and beam_size must be >= 1");
        }
        Ok(())
    }
}

/// Layer sizes of the encoder-decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerShape {
    pub model_dim: usize,
    pub ff_dim: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub max_positions: usize,
}

impl TransformerShape {
    pub fn tiny() -> Self {
        Self {
            model_dim: 8,
            ff_dim: 16,
            heads: 2,
            encoder_layers: 1,
            decoder_layers: 1,
            max_positions: 64,
        }
    }

    pub fn desk() -> Self {
        Self {
            model_dim: 64,
            ff_dim: 128,
            heads: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            max_positions: 128,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.model_dim == 0 || self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(ModelError::InvalidConfig(
                "model_dim must be a positive multiple of heads".into(),
            ));
        }
        if self.encoder_layers == 0 || self.decoder_layers == 0 || self.ff_dim == 0 {
            return Err(ModelError::InvalidConfig(
                "layer counts and ff_dim must be >= 1".into(),
            ));
        }
        if self.max_positions < 2 {
            return Err(ModelError::InvalidConfig("max_positions must be >= 2".into()));
        }
        Ok(())
    }
}
