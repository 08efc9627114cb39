//! Property tests over the schedule family and the numeric substrate.

use proptest::prelude::*;

use layerdrop::flops;
use layerdrop::model::{ModelConfig, Variant};
use layerdrop::schedule::DropSchedule;
use layerdrop::tape::Tape;
use layerdrop::tensor::Tensor;

fn schedule_strategy() -> impl Strategy<Value = DropSchedule> {
    (0.05f64..=1.0, 1usize..=5000, 1usize..=32).prop_map(|(theta_limit, total, layers)| {
        DropSchedule::with_default_gamma(theta_limit, total, layers).unwrap()
    })
}

proptest! {
    #[test]
    fn theta_is_monotone_from_one_to_the_limit(sched in schedule_strategy()) {
        prop_assert_eq!(sched.theta(0), 1.0);
        let mut prev = 1.0f64;
        for k in 0..=20 {
            let t = k * sched.total_steps / 10; // past T as well
            let theta = sched.theta(t);
            prop_assert!(theta <= prev + 1e-15);
            prop_assert!(theta >= sched.theta_limit - 1e-15);
            prev = theta;
        }
        // Far past T the curve is numerically at its limit.
        prop_assert!((sched.theta(sched.total_steps * 50) - sched.theta_limit).abs() < 1e-9);
    }

    #[test]
    fn keep_probs_decrease_in_depth_and_time(sched in schedule_strategy(), t in 0usize..20_000) {
        let now = sched.keep_probs(t);
        let later = sched.keep_probs(t + 1 + t / 2);
        prop_assert_eq!(now[0], 1.0);
        for l in 1..now.len() {
            prop_assert!(now[l] <= now[l - 1] + 1e-15);
            prop_assert!(later[l] <= now[l] + 1e-15);
        }
    }

    #[test]
    fn gate_sampling_is_a_pure_function(sched in schedule_strategy(), t in 0usize..10_000, seed: u64) {
        let a = sched.sample_gates(t, seed);
        let b = sched.sample_gates(t, seed);
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.kept, a.gates.iter().filter(|&&g| g).count());
        prop_assert!(a.gates[0], "first layer keeps probability 1");
    }

    #[test]
    fn flops_fraction_starts_at_one_and_never_increases(sched in schedule_strategy()) {
        let cfg = ModelConfig {
            layers: sched.layers,
            hidden: 32,
            heads: 4,
            vocab: 50,
            max_seq: 16,
            variant: Variant::St,
            dropout: 0.1,
            ln_eps: 1e-5,
            init_std: 0.02,
        };
        prop_assert_eq!(flops::flops_per_step(&cfg, &sched, 0), 1.0);
        let mut prev = 1.0;
        for k in 0..=10 {
            let f = flops::flops_per_step(&cfg, &sched, k * sched.total_steps / 5);
            prop_assert!(f <= prev + 1e-15);
            prop_assert!(f > 0.0);
            prev = f;
        }
    }

    #[test]
    fn softmax_rows_always_sum_to_one(
        rows in 1usize..6,
        cols in 1usize..8,
        raw in prop::collection::vec(-30.0f64..30.0, 1..48),
    ) {
        let mut data = raw;
        data.resize(rows * cols, 0.1);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![rows, cols], data).unwrap());
        let s = tape.softmax(x, 1).unwrap();
        let out = tape.value(s).data();
        for r in 0..rows {
            let sum: f64 = out[r * cols..(r + 1) * cols].iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12, "row {} sums to {}", r, sum);
            prop_assert!(out[r * cols..(r + 1) * cols].iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized(
        rows in 1usize..5,
        cols in 2usize..10,
        raw in prop::collection::vec(-5.0f64..5.0, 2..50),
        spread_elt in 1.0f64..4.0,
    ) {
        let mut data = raw;
        data.resize(rows * cols, 0.0);
        // Guarantee at least two distinct values per row so the variance
        // is bounded away from zero.
        for r in 0..rows {
            data[r * cols] += spread_elt;
        }
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![rows, cols], data).unwrap());
        let g = tape.constant(Tensor::filled(vec![cols], 1.0));
        let b = tape.constant(Tensor::zeros(vec![cols]));
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        let out = tape.value(y).data();
        for r in 0..rows {
            let row = &out[r * cols..(r + 1) * cols];
            let mean: f64 = row.iter().sum::<f64>() / cols as f64;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn backward_is_linear_over_summed_paths(
        w in prop::collection::vec(-2.0f64..2.0, 4),
        a in prop::collection::vec(-2.0f64..2.0, 4),
        b in prop::collection::vec(-2.0f64..2.0, 4),
    ) {
        // grad of sum(w*a) + sum(w*b) equals grad of sum(w*(a+b)).
        let run = |pieces: bool| -> Vec<f64> {
            let mut tape = Tape::new();
            let wn = tape.leaf(Tensor::new(vec![4], w.clone()).unwrap());
            let an = tape.constant(Tensor::new(vec![4], a.clone()).unwrap());
            let bn = tape.constant(Tensor::new(vec![4], b.clone()).unwrap());
            let loss = if pieces {
                let wa = tape.mul(wn, an).unwrap();
                let wb = tape.mul(wn, bn).unwrap();
                let sa = tape.sum(wa);
                let sb = tape.sum(wb);
                tape.add(sa, sb).unwrap()
            } else {
                let ab = tape.add(an, bn).unwrap();
                let wab = tape.mul(wn, ab).unwrap();
                tape.sum(wab)
            };
            tape.backward(loss).unwrap();
            tape.grad(wn).unwrap().into_data()
        };
        let split = run(true);
        let joint = run(false);
        for (s, j) in split.iter().zip(&joint) {
            prop_assert!((s - j).abs() < 1e-12);
        }
    }
}
