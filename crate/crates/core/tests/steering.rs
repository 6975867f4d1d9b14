// SPDX-License-Identifier: MIT OR Apache-2.0

//! Closed-form correction: oracles, KKT conditions, invariants and the
//! decode-time controller.

use barrier_steer::barrier::{barrier_direct, BarrierGradient};
use barrier_steer::harness::random_prompts;
use barrier_steer::model::{generate, init_model, GenerateOptions, ModelConfig};
use barrier_steer::numeric::{matvec, seeded_gaussian, Rng};
use barrier_steer::steering::{
    apply_steering, continuous_correction, lift, q_only_correction, qp_oracle, qp_oracle_iterative,
    solve_correction, SteeringConfig, SteeringMode,
};
use proptest::prelude::*;

fn gradient(seed: u64, d: usize, scale: f64) -> BarrierGradient {
    let g = seeded_gaussian(&mut Rng::new(seed), d);
    BarrierGradient::new(g.into_iter().map(|v| v * scale).collect())
}

#[test]
fn both_oracles_agree_with_closed_form() {
    let mut rng = Rng::new(5);
    for i in 0..200 {
        let g = gradient(i, 32, 0.1 + rng.uniform() * 3.0);
        let (h, tau) = (rng.gaussian() * 5.0, rng.gaussian() * 5.0);
        let c = solve_correction(h, &g, tau, 0.0);
        let exact = qp_oracle(h, &g.g, tau).unwrap();
        let iterative = qp_oracle_iterative(h, &g.g, tau, 4000).unwrap();
        for ((a, b), e) in c.theta.iter().zip(&exact).zip(&iterative) {
            assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()));
            assert!((a - e).abs() <= 1e-6 * (1.0 + b.abs()));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn inactive_iff_above_threshold(seed in 0u64..10_000, h in -20.0f64..20.0, tau in -20.0f64..20.0) {
        let g = gradient(seed, 12, 1.0);
        let c = solve_correction(h, &g, tau, 1e-6);
        prop_assert_eq!(c.fired, h < tau);
        if h >= tau {
            prop_assert!(c.theta.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn kkt_conditions(seed in 0u64..10_000, h in -20.0f64..20.0, tau in -20.0f64..20.0) {
        let g = gradient(seed, 12, 1.0);
        let c = solve_correction(h, &g, tau, 0.0);
        let l = lift(&g, &c).unwrap();
        let need = tau - h;
        prop_assert!(c.lambda >= 0.0);
        prop_assert!(l >= need - 1e-10 * need.abs().max(1.0));
        prop_assert!((c.lambda * (l - need)).abs() <= 1e-10 * need.abs().max(1.0));
        // Stationarity: θ = λ g.
        for (t, gi) in c.theta.iter().zip(&g.g) {
            prop_assert!((t - c.lambda * gi).abs() <= 1e-15 * (1.0 + t.abs()));
        }
    }

    #[test]
    fn any_feasible_point_is_no_shorter(seed in 0u64..10_000, h in -20.0f64..0.0, shift in -3.0f64..3.0) {
        let g = gradient(seed, 8, 1.0);
        let c = solve_correction(h, &g, 0.0, 0.0);
        // Move along a direction orthogonal to g: stays feasible, only gets longer.
        let mut v = seeded_gaussian(&mut Rng::new(seed + 7), 8);
        let p: f64 = v.iter().zip(&g.g).map(|(a, b)| a * b).sum::<f64>() / g.norm_sq;
        v.iter_mut().zip(&g.g).for_each(|(a, b)| *a -= p * b);
        let other: Vec<f64> = c.theta.iter().zip(&v).map(|(a, b)| a + shift * b).collect();
        let n = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>();
        prop_assert!(n(&other) >= n(&c.theta) * (1.0 - 1e-12));
    }

    #[test]
    fn norm_is_violation_over_gradient_norm(seed in 0u64..10_000, v in 0.0f64..50.0, scale in 0.01f64..100.0) {
        let g = gradient(seed, 10, scale);
        let c = solve_correction(-v, &g, 0.0, 0.0);
        let expected = v / g.norm_sq.sqrt();
        prop_assert!((c.norm() - expected).abs() <= 1e-12 * (1.0 + expected));
    }

    #[test]
    fn shifting_h_and_tau_together_changes_nothing(seed in 0u64..10_000, h in -5.0f64..5.0, tau in -5.0f64..5.0, s in -100.0f64..100.0) {
        let g = gradient(seed, 6, 1.0);
        let a = solve_correction(h, &g, tau, 1e-6);
        let b = solve_correction(h + s, &g, tau + s, 1e-6);
        prop_assert_eq!(a.fired, b.fired);
        for (x, y) in a.theta.iter().zip(&b.theta) {
            prop_assert!((x - y).abs() <= 1e-9 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn alpha_scales_the_applied_step(seed in 0u64..10_000, alpha in 0.0f64..3.0) {
        let g = gradient(seed, 6, 1.0);
        let x = seeded_gaussian(&mut Rng::new(seed ^ 1), 6);
        let h: f64 = g.g.iter().zip(&x).map(|(a, b)| a * b).sum();
        let c = solve_correction(h, &g, h + 1.0, 0.0);
        let y = apply_steering(&x, &c, alpha).unwrap();
        let h2: f64 = g.g.iter().zip(&y).map(|(a, b)| a * b).sum();
        prop_assert!((h2 - (h + alpha)).abs() <= 1e-10 * (1.0 + h.abs()));
    }

    #[test]
    fn continuous_always_lands_on_tau(seed in 0u64..10_000, h in -20.0f64..20.0, tau in -20.0f64..20.0) {
        let g = gradient(seed, 8, 1.0);
        let c = continuous_correction(h, &g, tau, 0.0);
        prop_assert!(c.fired);
        prop_assert!((h + lift(&g, &c).unwrap() - tau).abs() <= 1e-10 * (1.0 + tau.abs().max(h.abs())));
        if h >= tau {
            let gated = solve_correction(h, &g, tau, 0.0);
            prop_assert!(gated.theta.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn q_only_is_minimum_norm_in_query_space(seed in 0u64..10_000, v in 0.0f64..10.0) {
        let qg = seeded_gaussian(&mut Rng::new(seed), 16);
        let c = q_only_correction(-v, &qg, 0.0, 0.0);
        let oracle = qp_oracle(-v, &qg, 0.0).unwrap();
        for (a, b) in c.theta.iter().zip(&oracle) {
            prop_assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()));
        }
    }
}

fn setup() -> (barrier_steer::model::ModelWeights, barrier_steer::model::Prompt) {
    let config = ModelConfig {
        seed: 21,
        eos_token: None,
        ..ModelConfig::default()
    };
    let w = init_model(&config).unwrap();
    let p = random_prompts(&config, 1, 6, 77).remove(0);
    (w, p)
}

#[test]
fn regulated_decode_restores_every_fired_layer() {
    let (w, prompt) = setup();
    let steering = SteeringConfig {
        tau: 0.05,
        epsilon: 0.0,
        steered_layers: vec![1, 2, 4],
        ..SteeringConfig::default()
    };
    let options = GenerateOptions {
        max_new: 20,
        capture_inputs: true,
        ..GenerateOptions::default()
    };
    let gen = generate(&w, &prompt, &steering, &options).unwrap();
    let mut fired = 0;
    for (step, r) in gen.trace.records() {
        let x = r.steered_input.as_ref().unwrap();
        let h = barrier_direct(x, &w.layers[r.layer], &gen.cache, r.layer, &gen.context.image_positions).unwrap();
        if r.fired {
            fired += 1;
            assert!((h - steering.tau).abs() <= 1e-9, "step {} layer {}: {h}", step.step, r.layer);
        } else {
            assert!(h >= steering.tau);
        }
    }
    assert!(fired > 0);
}

#[test]
fn q_only_leaves_the_cache_unsteered() {
    let (w, prompt) = setup();
    let steering = SteeringConfig {
        tau: 0.5,
        mode: SteeringMode::QOnly,
        ..SteeringConfig::default()
    };
    let options = GenerateOptions {
        max_new: 10,
        capture_inputs: true,
        ..GenerateOptions::default()
    };
    let gen = generate(&w, &prompt, &steering, &options).unwrap();
    let mut fired = 0;
    for (step, r) in gen.trace.records() {
        fired += usize::from(r.fired);
        let x = r.steered_input.as_ref().unwrap();
        for h in 0..w.config.n_heads {
            let k = matvec(&w.layers[r.layer].w_k[h], x).unwrap();
            assert_eq!(k.as_slice(), gen.cache.key(r.layer, h, step.position));
        }
        // The recorded input is the unmodified one, so its barrier is the recorded h.
        let h = barrier_direct(x, &w.layers[r.layer], &gen.cache, r.layer, &gen.context.image_positions).unwrap();
        assert!((h - r.h).abs() <= 1e-12 * h.abs().max(1.0));
    }
    assert!(fired > 0);
}

#[test]
fn continuous_fires_on_every_record() {
    let (w, prompt) = setup();
    let steering = SteeringConfig {
        tau: -0.3,
        mode: SteeringMode::Continuous,
        ..SteeringConfig::default()
    };
    let gen = generate(&w, &prompt, &steering, &GenerateOptions { max_new: 10, ..GenerateOptions::default() }).unwrap();
    assert!(gen.trace.records().all(|(_, r)| r.fired));
    assert_eq!(gen.trace.records().count(), 10 * steering.steered_layers.len());
}
