// SPDX-License-Identifier: MIT OR Apache-2.0

//! Fast oracle and invariant checks behind the `selftest` subcommand.

use serde::Serialize;

use crate::barrier::{barrier_direct, barrier_value};
use crate::error::Result;
use crate::harness::stats::{bin_analysis, wilson_interval, Z_95};
use crate::model::{
    decode_step, generate, init_model, prefill, token_embedding, GenerateOptions, ModelConfig,
    NoHook, Prompt,
};
use crate::numeric::{dot, norm, seeded_gaussian, Rng};
use crate::barrier::BarrierGradient;
use crate::steering::{qp_oracle, solve_correction, SteeringConfig, SteeringMode};

/// Outcome of one check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> Check {
    Check {
        name,
        passed,
        detail,
    }
}

fn small_prompt(config: &ModelConfig, rng: &mut Rng, n_image: usize) -> Prompt {
    Prompt {
        images: (0..n_image).map(|_| seeded_gaussian(rng, config.d_model)).collect(),
        tokens: vec![1, 2, 3],
    }
}

fn closed_form(seed: u64) -> Check {
    let mut rng = Rng::new(seed);
    let mut worst = 0.0f64;
    let mut kkt_ok = true;
    for _ in 0..200 {
        let g = BarrierGradient::new(seeded_gaussian(&mut rng, 32));
        let h = rng.gaussian() * 3.0;
        let tau = rng.gaussian() * 3.0;
        let c = solve_correction(h, &g, tau, 0.0);
        let oracle = match qp_oracle(h, &g.g, tau) {
            Ok(t) => t,
            Err(_) => return check("closed_form_matches_qp", false, "oracle failed".into()),
        };
        let diff: Vec<f64> = c.theta.iter().zip(&oracle).map(|(a, b)| a - b).collect();
        worst = worst.max(norm(&diff) / norm(&oracle).max(1e-300));
        let lift = dot(&g.g, &c.theta).unwrap_or(f64::NAN);
        let need = (tau - h).max(0.0);
        kkt_ok &= c.lambda >= 0.0 && lift >= need - 1e-9 * need.max(1.0);
        kkt_ok &= (c.lambda * (lift - (tau - h))).abs() <= 1e-9 * (1.0 + need);
    }
    let passed = worst <= 1e-8 && kkt_ok;
    check(
        "closed_form_matches_qp",
        passed,
        format!("max relative error {worst:.2e}, KKT {}", if kkt_ok { "ok" } else { "violated" }),
    )
}

fn gradient_and_restoration(seed: u64) -> Result<Vec<Check>> {
    let config = ModelConfig {
        seed,
        ..ModelConfig::default()
    };
    let weights = init_model(&config)?;
    let mut rng = Rng::new(seed ^ 0xfd);
    let prompt = small_prompt(&config, &mut rng, 4);
    let layer = 2;
    let pre = prefill(&weights, &prompt.tokens, &prompt.images, &[layer])?;
    let sl = pre.context.layer(layer).expect("steered layer present");
    let x = seeded_gaussian(&mut rng, config.d_model);
    let step = 1e-5;
    let mut worst = 0.0f64;
    for i in 0..config.d_model {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[i] += step;
        xm[i] -= step;
        let fp = barrier_direct(&xp, &weights.layers[layer], &pre.cache, layer, &pre.context.image_positions)?;
        let fm = barrier_direct(&xm, &weights.layers[layer], &pre.cache, layer, &pre.context.image_positions)?;
        worst = worst.max(((fp - fm) / (2.0 * step) - sl.gradient.g[i]).abs());
    }
    let grad = check(
        "gradient_matches_finite_differences",
        worst <= 1e-6,
        format!("max abs error {worst:.2e}"),
    );

    let h = barrier_value(&sl.gradient, &x)?;
    let tau = h + 1.0;
    let c = solve_correction(h, &sl.gradient, tau, 0.0);
    let xs: Vec<f64> = x.iter().zip(&c.theta).map(|(a, b)| a + b).collect();
    let after = barrier_direct(&xs, &weights.layers[layer], &pre.cache, layer, &pre.context.image_positions)?;
    let err = (after - tau).abs();
    let restore = check(
        "restoration_reaches_tau",
        err <= 1e-9 * tau.abs().max(1.0),
        format!("|h(x + θ) − τ| = {err:.2e}"),
    );
    Ok(vec![grad, restore])
}

fn decode_equivalences(seed: u64) -> Result<Vec<Check>> {
    let config = ModelConfig {
        seed,
        eos_token: None,
        ..ModelConfig::default()
    };
    let weights = init_model(&config)?;
    let mut rng = Rng::new(seed ^ 0xdec);
    let prompt = small_prompt(&config, &mut rng, 5);
    let options = GenerateOptions {
        max_new: 12,
        ..GenerateOptions::default()
    };
    let base = SteeringConfig {
        tau: 0.0,
        ..SteeringConfig::default()
    };

    // Reference decode without any hook.
    let (last, head) = prompt.tokens.split_last().expect("non-empty prompt");
    let pre = prefill(&weights, head, &prompt.images, &[])?;
    let mut cache = pre.cache;
    let mut input = *last;
    let mut reference = Vec::new();
    for _ in 0..options.max_new {
        let out = decode_step(&weights, &mut cache, token_embedding(&weights, input)?, &mut NoHook)?;
        let t = crate::model::argmax(&out.logits) as u32;
        reference.push(t);
        input = t;
    }
    let off = generate(&weights, &prompt, &base.with_mode(SteeringMode::Off), &options)?;
    let bit_identical = off.tokens == reference
        && (0..cache.n_layers()).all(|l| {
            (0..cache.n_heads()).all(|h| {
                (0..cache.len()).all(|j| {
                    cache.key(l, h, j) == off.cache.key(l, h, j)
                        && cache.value(l, h, j) == off.cache.value(l, h, j)
                })
            })
        });
    let hook_free = check(
        "mode_off_matches_hook_free_decode",
        bit_identical,
        format!("{} tokens compared with caches", reference.len()),
    );

    let closed = SteeringConfig {
        tau: -1e9,
        ..base.with_mode(SteeringMode::Regulated)
    };
    let gated = generate(&weights, &prompt, &closed, &options)?;
    let gate = check(
        "gate_closed_matches_off",
        gated.tokens == off.tokens,
        "regulated at τ = −1e9".into(),
    );

    let cont = generate(&weights, &prompt, &base.with_mode(SteeringMode::Continuous), &options)?;
    let all_fired = cont.trace.records().all(|(_, r)| r.fired);
    let continuous = check(
        "continuous_fires_every_step",
        all_fired && !cont.trace.is_empty(),
        format!("{} records", cont.trace.records().count()),
    );
    Ok(vec![hook_free, gate, continuous])
}

fn statistics() -> Result<Vec<Check>> {
    let (lo, hi) = wilson_interval(0, 10, Z_95)?;
    let wilson = check(
        "wilson_zero_of_ten",
        lo == 0.0 && (hi - 0.2775).abs() < 1e-3,
        format!("({lo}, {hi:.4})"),
    );
    let samples: Vec<(f64, bool)> = (0..50).map(|i| (f64::from(i % 7), i % 3 == 0)).collect();
    let report = bin_analysis(&samples)?;
    let counts: Vec<u64> = report.bins.iter().map(|b| b.count).collect();
    let spread = counts.iter().max().unwrap_or(&0) - counts.iter().min().unwrap_or(&0);
    let bins = check(
        "bins_balanced",
        report.bins.len() == 9 && spread <= 1,
        format!("counts {counts:?}"),
    );
    Ok(vec![wilson, bins])
}

/// Run every check. Errors inside a check surface as a failed [`Check`].
#[must_use]
pub fn run_selftest(seed: u64) -> Vec<Check> {
    let mut out = vec![closed_form(seed)];
    let failed = |name: &'static str, e: crate::Error| check(name, false, e.to_string());
    match gradient_and_restoration(seed) {
        Ok(c) => out.extend(c),
        Err(e) => out.push(failed("gradient_and_restoration", e)),
    }
    match decode_equivalences(seed) {
        Ok(c) => out.extend(c),
        Err(e) => out.push(failed("decode_equivalences", e)),
    }
    match statistics() {
        Ok(c) => out.extend(c),
        Err(e) => out.push(failed("statistics", e)),
    }
    out
}
