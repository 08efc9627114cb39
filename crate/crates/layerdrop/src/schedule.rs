//! Progressive layer-drop schedule.
//!
//! The temporal keep ratio decays from 1 toward a limit value:
//!
//! ```text
//! theta(t) = (1 - theta_limit) * exp(-gamma * t) + theta_limit
//! ```
//!
//! with the heuristic `gamma = 100 / T`, which puts `theta(T)` within 1e-5
//! of the limit. At a step the global ratio is spread across depth so lower
//! layers are kept more reliably: starting from `p = 1`, each layer consumes
//! the current `p` and then decrements it by `(1 - theta(t)) / L`, i.e.
//!
//! ```text
//! p_l(t) = 1 - (l - 1) * (1 - theta(t)) / L      (l = 1..=L)
//! ```
//!
//! Layer 1 therefore always keeps probability 1. Gates are one Bernoulli
//! draw per block, shared by both sublayers, from a counter-based generator
//! keyed on `(seed, step, layer)` so outcomes never depend on evaluation
//! order.
//!
//! Steady-state expected depth under these probabilities is
//! `L - (1-theta_limit)(L-1)/2`, e.g. `(3L+1)/4 = 9.25` for `theta_limit =
//! 0.5, L = 12`. A variant that decrements `p` before the first use gives
//! `(3L-1)/4 = 8.75`; both round to the commonly quoted `3L/4 ≈ 9`. The
//! decrement-after form implemented here is authoritative for this crate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::GatePlan;
use crate::rng::keyed_bernoulli;

const GATE_STREAM: u64 = 0x67617465;

/// Recommended range for the keep-ratio limit; values below 0.5 are known
/// to risk divergence and only warn.
pub const THETA_RECOMMENDED: (f64, f64) = (0.5, 0.9);

/// Progressive drop schedule parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DropSchedule {
    /// Limit keep ratio `theta_limit` in (0, 1].
    pub theta_limit: f64,
    /// Decay rate of the keep-ratio curve, > 0.
    pub gamma: f64,
    /// Total training steps T.
    pub total_steps: usize,
    /// Block count L.
    pub layers: usize,
}

/// `gamma = 100 / T`: the keep ratio reaches its limit (within 1e-5 of
/// `theta_limit`) by the end of training.
pub fn gamma_default(total_steps: usize) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::contract(
            "gamma heuristic needs a positive total step count",
        ));
    }
    Ok(100.0 / total_steps as f64)
}

impl DropSchedule {
    pub fn new(theta_limit: f64, gamma: f64, total_steps: usize, layers: usize) -> Result<Self> {
        if !(theta_limit > 0.0 && theta_limit <= 1.0) {
            return Err(Error::contract(format!(
                "theta_limit must be in (0, 1], got {theta_limit}"
            )));
        }
        if gamma <= 0.0 {
            return Err(Error::contract(format!("gamma must be > 0, got {gamma}")));
        }
        if layers == 0 {
            return Err(Error::contract("schedule needs at least one layer"));
        }
        if theta_limit < THETA_RECOMMENDED.0 || theta_limit > THETA_RECOMMENDED.1 {
            log::warn!(
                "theta_limit {theta_limit} outside the recommended [{}, {}]; \
                 small keep ratios (e.g. 0.3) are known to diverge",
                THETA_RECOMMENDED.0,
                THETA_RECOMMENDED.1
            );
        }
        Ok(DropSchedule {
            theta_limit,
            gamma,
            total_steps,
            layers,
        })
    }

    /// Schedule with the `gamma = 100/T` heuristic.
    pub fn with_default_gamma(theta_limit: f64, total_steps: usize, layers: usize) -> Result<Self> {
        DropSchedule::new(theta_limit, gamma_default(total_steps)?, total_steps, layers)
    }

    /// Keep ratio at step `t` (closed form; exactly 1 at `t = 0`).
    pub fn theta(&self, t: usize) -> f64 {
        (1.0 - self.theta_limit) * (-self.gamma * t as f64).exp() + self.theta_limit
    }

    /// Per-layer keep probabilities at step `t`; `p[0] == 1` always.
    pub fn keep_probs(&self, t: usize) -> Vec<f64> {
        self.keep_probs_for_theta(self.theta(t))
    }

    fn keep_probs_for_theta(&self, theta: f64) -> Vec<f64> {
        let step = (1.0 - theta) / self.layers as f64;
        (0..self.layers).map(|l| 1.0 - l as f64 * step).collect()
    }

    /// Keep probabilities in the `t -> inf` limit.
    pub fn steady_keep_probs(&self) -> Vec<f64> {
        self.keep_probs_for_theta(self.theta_limit)
    }

    /// One Bernoulli gate per layer from the `(seed, t, layer)` key.
    pub fn sample_gates(&self, t: usize, seed: u64) -> GateTrace {
        let keep_probs = self.keep_probs(t);
        let gates: Vec<bool> = keep_probs
            .iter()
            .enumerate()
            .map(|(l, &p)| keyed_bernoulli(seed, &[GATE_STREAM, t as u64, l as u64], p))
            .collect();
        let kept = gates.iter().filter(|&&g| g).count();
        GateTrace {
            step: t,
            keep_probs,
            gates,
            kept,
        }
    }

    /// Analytic expected number of active blocks at step `t`.
    pub fn expected_depth(&self, t: usize) -> f64 {
        self.keep_probs(t).iter().sum()
    }

    /// Expected depth in the steady state: `L - (1-theta_limit)(L-1)/2`.
    pub fn steady_expected_depth(&self) -> f64 {
        self.steady_keep_probs().iter().sum()
    }

    /// Mean expected depth over `t = 0..=T`.
    pub fn expected_depth_mean(&self) -> f64 {
        let total: f64 = (0..=self.total_steps).map(|t| self.expected_depth(t)).sum();
        total / (self.total_steps + 1) as f64
    }
}

/// Per-step sampling outcome: the probabilities used and the gates drawn.
#[derive(Debug, Clone, PartialEq)]
pub struct GateTrace {
    pub step: usize,
    pub keep_probs: Vec<f64>,
    pub gates: Vec<bool>,
    pub kept: usize,
}

impl GateTrace {
    /// Forward plan: active branches rescaled by `1/p` in training,
    /// unscaled otherwise.
    pub fn plan(&self, training: bool) -> GatePlan {
        GatePlan {
            gates: self.gates.clone(),
            scales: if training {
                self.keep_probs.iter().map(|&p| 1.0 / p).collect()
            } else {
                vec![1.0; self.gates.len()]
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn theta_at_zero_is_exactly_one() {
        for theta_limit in [0.5, 0.7, 0.9, 0.3] {
            let s = DropSchedule::new(theta_limit, 0.01, 1000, 12).unwrap();
            assert_eq!(s.theta(0), 1.0, "theta_limit {theta_limit}");
        }
    }

    #[test]
    fn theta_at_t_with_default_gamma_reaches_limit() {
        let t = 200_000;
        let s = DropSchedule::with_default_gamma(0.5, t, 12).unwrap();
        assert!((s.gamma - 5e-4).abs() < 1e-18);
        assert!((s.theta(t) - 0.5).abs() < 1e-5);
    }

    #[test]
    fn theta_halfway_matches_closed_form() {
        let t = 1000;
        let s = DropSchedule::with_default_gamma(0.9, t, 12).unwrap();
        let expected = 0.9 + 0.1 * (-50.0_f64).exp();
        assert!((s.theta(t / 2) - expected).abs() < 1e-15);
    }

    #[test]
    fn gamma_default_values() {
        assert_eq!(gamma_default(100).unwrap(), 1.0);
        assert_eq!(gamma_default(200_000).unwrap(), 5e-4);
        assert!(gamma_default(0).is_err());
    }

    #[test]
    fn keep_probs_start_at_one_and_decrease_linearly() {
        let s = DropSchedule::new(0.5, 1.0, 100, 4).unwrap();
        // At t=0 theta is 1, so every p is 1.
        assert_eq!(s.keep_probs(0), vec![1.0; 4]);
        // Steady state, L=4: the documented trace.
        let steady = s.steady_keep_probs();
        assert_eq!(steady, vec![1.0, 0.875, 0.75, 0.625]);
    }

    #[test]
    fn keep_probs_steady_state_l12_last_layer() {
        let s = DropSchedule::new(0.5, 1.0, 100, 12).unwrap();
        let p = s.steady_keep_probs();
        assert!((p[11] - (1.0 - 11.0 / 24.0)).abs() < 1e-15);
        assert!((p[11] - 0.5417).abs() < 1e-4);
    }

    #[test]
    fn expected_depth_at_zero_is_layer_count() {
        let s = DropSchedule::with_default_gamma(0.5, 5000, 6).unwrap();
        assert_eq!(s.expected_depth(0), 6.0);
    }

    #[test]
    fn steady_expected_depth_is_three_quarters_ish() {
        let s = DropSchedule::new(0.5, 1.0, 100, 12).unwrap();
        // (3L + 1) / 4 under decrement-after-use; the paper's (3L-1)/4
        // corresponds to decrementing before use. Both are close to 3L/4.
        assert!((s.steady_expected_depth() - 9.25).abs() < 1e-12);
    }

    #[test]
    fn gates_at_t_zero_are_all_on_and_sampling_is_pure() {
        let s = DropSchedule::with_default_gamma(0.5, 1000, 8).unwrap();
        let trace = s.sample_gates(0, 99);
        assert!(trace.gates.iter().all(|&g| g));
        assert_eq!(trace.kept, 8);
        // Same (seed, t) twice gives the identical trace.
        assert_eq!(s.sample_gates(17, 4), s.sample_gates(17, 4));
    }

    #[test]
    fn first_layer_gate_is_always_on() {
        let s = DropSchedule::new(0.5, 1.0, 100, 6).unwrap();
        for t in [1, 10, 50, 100] {
            for seed in 0..50 {
                assert!(s.sample_gates(t, seed).gates[0]);
            }
        }
    }

    #[test]
    fn monte_carlo_keep_frequency_within_3_sigma() {
        let s = DropSchedule::new(0.5, 1.0, 100, 12).unwrap();
        let t = 10_000; // effectively steady state for gamma=1
        let p = s.keep_probs(t);
        let draws = 50_000;
        let mut keeps = [0usize; 12];
        for seed in 0..draws {
            let trace = s.sample_gates(t, seed as u64);
            for (l, &g) in trace.gates.iter().enumerate() {
                if g {
                    keeps[l] += 1;
                }
            }
        }
        for l in 0..12 {
            let freq = keeps[l] as f64 / draws as f64;
            let sigma = (p[l] * (1.0 - p[l]) / draws as f64).sqrt();
            assert!(
                (freq - p[l]).abs() <= 3.0 * sigma.max(1e-9),
                "layer {l}: freq {freq} vs p {} (sigma {sigma})",
                p[l]
            );
        }
    }

    #[test]
    fn trace_plan_scales_only_in_training() {
        let s = DropSchedule::new(0.5, 1.0, 100, 4).unwrap();
        let trace = s.sample_gates(1_000, 3);
        let train_plan = trace.plan(true);
        let eval_plan = trace.plan(false);
        for (l, &p) in trace.keep_probs.iter().enumerate() {
            assert_eq!(train_plan.scales[l], 1.0 / p);
            assert_eq!(eval_plan.scales[l], 1.0);
        }
    }

    #[test]
    fn schedule_validation() {
        assert!(DropSchedule::new(0.0, 1.0, 10, 4).is_err());
        assert!(DropSchedule::new(1.1, 1.0, 10, 4).is_err());
        assert!(DropSchedule::new(0.5, 0.0, 10, 4).is_err());
        assert!(DropSchedule::new(0.5, 1.0, 10, 0).is_err());
        // Below the recommended range: allowed (warns).
        assert!(DropSchedule::new(0.3, 1.0, 10, 4).is_ok());
    }
}
