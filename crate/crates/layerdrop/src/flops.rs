//! Floating-point-operation model for schedule accounting.
//!
//! Only multiply–add-dominated terms are counted, with one documented
//! constant per op family (forward pass, per sequence):
//!
//! | op                  | FLOPs                          |
//! |---------------------|--------------------------------|
//! | matmul m×k · k×n    | `2·m·k·n`                      |
//! | layer norm          | `8` per element                |
//! | softmax             | `5` per element                |
//! | gelu                | `14` per element               |
//! | residual add        | `1` per element                |
//! | embedding lookup    | `0` (copy)                     |
//! | cross-entropy       | `5` per logit                  |
//!
//! A backward pass costs roughly twice the forward matmuls; because a
//! bypassed block skips forward and backward alike, every ratio reported
//! here is unchanged by that factor, so the model counts forward FLOPs.
//!
//! Block forward total (sequence length S, hidden d, H heads, FFN width 4d):
//! `24·S·d² + 4·S²·d` matmul terms plus `5·H·S²` softmax, `56·S·d` gelu,
//! `16·S·d + 2·S·d` norms and adds. The fixed (depth-independent) cost is
//! the embedding add, the final norm (PreLN/ST), the tied-head projection
//! `2·S·d·V` and the loss.

use crate::model::ModelConfig;
use crate::schedule::DropSchedule;

/// Forward FLOPs of one transformer block on one sequence.
pub fn block_flops(cfg: &ModelConfig) -> f64 {
    let s = cfg.max_seq as f64;
    let d = cfg.hidden as f64;
    let h = cfg.heads as f64;
    let matmuls = 24.0 * s * d * d + 4.0 * s * s * d;
    let softmax = 5.0 * h * s * s;
    let gelu = 14.0 * (4.0 * s * d);
    let norms = 2.0 * 8.0 * s * d;
    let adds = 2.0 * s * d;
    matmuls + softmax + gelu + norms + adds
}

/// Forward FLOPs of the depth-independent parts (embeddings, final norm
/// when present, tied head, loss) on one sequence.
pub fn fixed_flops(cfg: &ModelConfig) -> f64 {
    let s = cfg.max_seq as f64;
    let d = cfg.hidden as f64;
    let v = cfg.vocab as f64;
    let embed_add = s * d;
    let final_norm = if cfg.variant.has_final_norm() {
        8.0 * s * d
    } else {
        0.0
    };
    let head = 2.0 * s * d * v;
    let loss = 5.0 * s * v;
    embed_add + final_norm + head + loss
}

/// Expected FLOPs at step `t` as a fraction of the full-depth model.
pub fn flops_per_step(cfg: &ModelConfig, sched: &DropSchedule, t: usize) -> f64 {
    let fb = block_flops(cfg);
    let ff = fixed_flops(cfg);
    let full = sched.layers as f64 * fb + ff;
    (sched.expected_depth(t) * fb + ff) / full
}

/// Block-only FLOPs fraction at step `t`: expected depth over `L`, i.e. the
/// zero-head-cost limit of [`flops_per_step`].
pub fn block_flops_fraction(sched: &DropSchedule, t: usize) -> f64 {
    sched.expected_depth(t) / sched.layers as f64
}

/// Steady-state block-only fraction, `steady_expected_depth / L`.
pub fn steady_block_flops_fraction(sched: &DropSchedule) -> f64 {
    sched.steady_expected_depth() / sched.layers as f64
}
