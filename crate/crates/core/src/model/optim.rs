use std::ops::Range;

use super::config::{Schedule, TrainConfig};

/// Learning rate for 1-based update `step`.
pub fn lr_at(step: u64, config: &TrainConfig) -> f64 {
    let step = step.max(1) as f64;
    let w = config.warmup_steps.max(1) as f64;
    match config.schedule {
        Schedule::InverseSqrt => {
            if step <= w {
                config.max_lr * step / w
            } else {
                config.max_lr * (w / step).sqrt()
            }
        }
    }
}

/// Rescales `grad` so its global L2 norm is at most `clip`. Returns the norm
/// before and after clipping.
pub fn clip_global_norm(grad: &mut [f64], clip: f64) -> (f64, f64) {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > clip && norm > 0.0 {
        let scale = clip / norm;
        grad.iter_mut().for_each(|g| *g *= scale);
        let after = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        (norm, after)
    } else {
        (norm, norm)
    }
}

/// Adam with bias correction and decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    /// Applies update number `t` (1-based) to the parameters in `ranges`.
    pub fn update(&mut self, params: &mut [f64], grad: &[f64], ranges: &[Range<usize>], lr: f64, t: u64, cfg: &TrainConfig) {
        let (b1, b2) = cfg.adam_betas;
        let c1 = 1.0 - b1.powi(t as i32);
        let c2 = 1.0 - b2.powi(t as i32);
        let step = lr * c2.sqrt() / c1;
        let decay = lr * cfg.weight_decay;
        for r in ranges {
            for i in r.clone() {
                let g = grad[i];
                self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
                self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
                params[i] -= decay * params[i];
                params[i] -= step * self.m[i] / (self.v[i].sqrt() + cfg.adam_eps);
            }
        }
    }
}
