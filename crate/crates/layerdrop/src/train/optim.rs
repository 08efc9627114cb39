//! Adam with global-norm clipping and decoupled weight decay, plus the
//! warmup/exponential-decay learning-rate rule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GradientMap, ModelWeights};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerConfig {
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    #[serde(default = "default_grad_clip")]
    pub grad_clip: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_weight_decay() -> f64 {
    0.01
}
fn default_grad_clip() -> f64 {
    1.0
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: default_weight_decay(),
            grad_clip: default_grad_clip(),
        }
    }
}

/// First/second moment accumulators, allocated lazily per parameter.
#[derive(Debug, Clone, Default)]
pub struct OptimizerState<T> {
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
    /// Optimizer steps taken (drives bias correction).
    pub step: usize,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new() -> Self {
        OptimizerState {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            step: 0,
        }
    }
}

/// One Adam update.
///
/// Order of operations: global-norm clip, moment update with bias
/// correction, then decoupled weight decay `w -= lr * wd * w`. Parameters
/// absent from `grads` (gated-off blocks) are untouched entirely — no
/// moment decay, no weight decay.
pub fn adam_step<T: Scalar>(
    weights: &mut ModelWeights<T>,
    grads: &GradientMap<T>,
    state: &mut OptimizerState<T>,
    lr: f64,
    cfg: &OptimizerConfig,
) -> Result<()> {
    if !grads.all_finite() {
        return Err(Error::Divergence(
            "non-finite gradient entering the optimizer".into(),
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = T::from_f64(cfg.beta1);
    let b2 = T::from_f64(cfg.beta2);
    let one_m_b1 = T::ONE - b1;
    let one_m_b2 = T::ONE - b2;
    let corr1 = T::ONE / (T::ONE - b1.powi(t));
    let corr2 = T::ONE / (T::ONE - b2.powi(t));
    let eps = T::from_f64(cfg.eps);
    let lr_t = T::from_f64(lr);
    let wd = T::from_f64(cfg.weight_decay);

    let clip_scale = if cfg.grad_clip > 0.0 {
        let norm = grads.global_norm().to_f64();
        if norm > cfg.grad_clip {
            T::from_f64(cfg.grad_clip / norm)
        } else {
            T::ONE
        }
    } else {
        T::ONE
    };

    for (name, grad) in grads.iter() {
        let w = weights.param_mut(name);
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(grad.shape().to_vec()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(grad.shape().to_vec()));
        for i in 0..grad.numel() {
            let g = grad.data()[i] * clip_scale;
            let mi = b1 * m.data()[i] + one_m_b1 * g;
            let vi = b2 * v.data()[i] + one_m_b2 * g * g;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let m_hat = mi * corr1;
            let v_hat = vi * corr2;
            let wi = w.data()[i];
            w.data_mut()[i] = wi - lr_t * m_hat / (v_hat.sqrt() + eps) - lr_t * wd * wi;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LrConfig {
    pub peak: f64,
    /// Fraction of total steps spent on the linear ramp from 0 to peak.
    #[serde(default = "default_warmup_ratio")]
    pub warmup_ratio: f64,
    #[serde(default = "default_decay_rate")]
    pub decay_rate: f64,
    #[serde(default = "default_decay_step")]
    pub decay_step: usize,
}

fn default_warmup_ratio() -> f64 {
    0.02
}
fn default_decay_rate() -> f64 {
    0.99
}
fn default_decay_step() -> usize {
    1000
}

impl LrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.peak <= 0.0 {
            return Err(Error::Config("peak learning rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) || self.warmup_ratio == 0.0 {
            return Err(Error::Config(format!(
                "warmup ratio must be in (0, 1), got {}",
                self.warmup_ratio
            )));
        }
        if self.decay_step == 0 {
            return Err(Error::Config("decay step must be positive".into()));
        }
        Ok(())
    }
}

/// Linear ramp 0 -> peak over `warmup_ratio * total` steps, then
/// exponential decay with a continuous exponent:
/// `peak * decay_rate^((step - warmup) / decay_step)`.
pub fn lr_at(step: usize, total_steps: usize, cfg: &LrConfig) -> f64 {
    let warmup = cfg.warmup_ratio * total_steps as f64;
    let s = step as f64;
    if s < warmup {
        cfg.peak * s / warmup
    } else {
        cfg.peak * cfg.decay_rate.powf((s - warmup) / cfg.decay_step as f64)
    }
}
