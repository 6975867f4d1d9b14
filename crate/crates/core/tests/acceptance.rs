// SPDX-License-Identifier: MIT OR Apache-2.0

//! Acceptance suite. Runs every criterion in sequence (timing criteria must
//! not share the CPU with other work), prints one line per criterion and
//! fails at the end if any criterion failed.

use std::time::{Duration, Instant};

use barrier_steer::barrier::{barrier_direct, BarrierGradient};
use barrier_steer::harness::{
    bin_analysis, calibration_barriers, object_samples, quantile, random_prompts,
    run_experiment, run_prompt, throughput_bench, wilson_interval, BarrierSource, BenchConfig,
    Experiment, ExperimentConfig, Prepared, RunConfig, N_BINS, Z_95,
};
use barrier_steer::model::{
    decode_step, generate, init_model, prefill, token_embedding, GenerateOptions, ModelConfig,
    NoHook, PrefillContext, Prompt, Session,
};
use barrier_steer::numeric::{matvec, norm, seeded_gaussian, Rng};
use barrier_steer::steering::{qp_oracle, solve_correction, SteeringConfig, SteeringMode};

const SEEDSET: [u64; 3] = [7, 8, 9];

struct Outcome {
    id: u32,
    name: &'static str,
    passed: bool,
    detail: String,
}

fn within(elapsed: Duration, limit_secs: f64) -> bool {
    elapsed.as_secs_f64() < limit_secs
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

fn prepared(seed: u64) -> Prepared {
    let mut cfg = RunConfig::default();
    cfg.task.seed = seed;
    cfg.model = cfg.task.model_config();
    cfg.prepare().expect("default config prepares")
}

fn default_experiment() -> ExperimentConfig {
    ExperimentConfig::default()
}

// 1. Closed form against the reflection oracle with a KKT certificate.
fn kkt() -> Outcome {
    let start = Instant::now();
    let mut rng = Rng::new(1);
    let mut worst = 0.0f64;
    let mut slack = 0.0f64;
    let mut ok = true;
    for _ in 0..1000 {
        let g = BarrierGradient::new(seeded_gaussian(&mut rng, 64));
        let h = 4.0 * rng.gaussian();
        let tau = 4.0 * rng.gaussian();
        let c = solve_correction(h, &g, tau, 0.0);
        let oracle = qp_oracle(h, &g.g, tau).expect("nonzero gradient");
        if h >= tau {
            ok &= c.theta.iter().all(|&v| v == 0.0) && !c.fired && c.lambda == 0.0;
            continue;
        }
        let diff: Vec<f64> = c.theta.iter().zip(&oracle).map(|(a, b)| a - b).collect();
        worst = worst.max(norm(&diff) / norm(&oracle));
        let lift: f64 = g.g.iter().zip(&c.theta).map(|(a, b)| a * b).sum();
        ok &= c.lambda >= 0.0;
        slack = slack.max((c.lambda * (lift - (tau - h))).abs());
    }
    let elapsed = start.elapsed();
    let passed = ok && worst <= 1e-8 && slack <= 1e-10 && within(elapsed, 5.0);
    Outcome {
        id: 1,
        name: "KKT and minimum-norm correctness",
        passed,
        detail: format!(
            "max rel err {worst:.2e} (≤1e-8), max |λ·slack| {slack:.2e} (≤1e-10), zero-when-inactive {ok}, {elapsed:.2?} (<5s)"
        ),
    }
}

// 2. Every fired step of a 500-prompt run lands exactly on τ.
fn restoration() -> Outcome {
    let start = Instant::now();
    let p = prepared(SEEDSET[0]);
    let steering = SteeringConfig {
        alpha: 1.0,
        epsilon: 0.0,
        ..p.steering.clone()
    };
    let options = GenerateOptions {
        capture_inputs: true,
        ..GenerateOptions::default()
    };
    let mut fired = 0usize;
    let mut worst = 0.0f64;
    for i in 0..500 {
        let prompt = p.task.prompt(i).prompt;
        let gen = generate(&p.weights, &prompt, &steering, &options).expect("decode");
        for (_, r) in gen.trace.records() {
            if !r.fired {
                continue;
            }
            fired += 1;
            let x = r.steered_input.as_ref().expect("captured");
            let h = barrier_direct(
                x,
                &p.weights.layers[r.layer],
                &gen.cache,
                r.layer,
                &gen.context.image_positions,
            )
            .expect("barrier");
            worst = worst.max(rel(h, steering.tau));
        }
    }
    let elapsed = start.elapsed();
    Outcome {
        id: 2,
        name: "exact constraint restoration",
        passed: fired > 0 && worst <= 1e-9 && within(elapsed, 60.0),
        detail: format!("{fired} fired steps, max rel |h(x̃)−τ| {worst:.2e} (≤1e-9), {elapsed:.2?} (<60s)"),
    }
}

// 3. Closed-form gradient against central differences; prompt constancy.
fn gradient() -> Outcome {
    let mut rng = Rng::new(3);
    let mut worst = 0.0f64;
    for instance in 0..100u64 {
        let config = ModelConfig {
            seed: instance,
            ..ModelConfig::default()
        };
        let weights = init_model(&config).expect("model");
        let layer = rng.below(config.n_layers);
        let prompt = random_prompts(&config, 1, 1 + rng.below(8), instance ^ 0x33).remove(0);
        let pre = prefill(&weights, &prompt.tokens, &prompt.images, &[layer]).expect("prefill");
        let g = &pre.context.layer(layer).expect("steered").gradient.g;
        let x = seeded_gaussian(&mut rng, config.d_model);
        let step = 1e-3;
        let fd: Vec<f64> = (0..config.d_model)
            .map(|i| {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += step;
                xm[i] -= step;
                let f = |v: &[f64]| {
                    barrier_direct(v, &weights.layers[layer], &pre.cache, layer, &pre.context.image_positions)
                        .expect("barrier")
                };
                (f(&xp) - f(&xm)) / (2.0 * step)
            })
            .collect();
        let diff: Vec<f64> = fd.iter().zip(g).map(|(a, b)| a - b).collect();
        worst = worst.max(norm(&diff) / norm(g));
    }

    // g rebuilt from the live cache at steps 1 and 50 matches the prefill copy bit for bit.
    let p = prepared(SEEDSET[0]);
    let mut weights = p.weights.clone();
    weights.config.eos_token = None;
    let layers = p.steering.steered_layers.clone();
    let mut session = Session::start(&weights, &p.task.prompt(0).prompt, &layers).expect("session");
    let observe = p.steering.with_mode(SteeringMode::Regulated);
    let mut constant = true;
    for step in 1..=50 {
        let (logits, _) = session.step(&observe, false).expect("step");
        session.feed(barrier_steer::model::argmax(&logits) as u32);
        if step == 1 || step == 50 {
            let rebuilt = PrefillContext::build(&weights.layers, &session.cache, &session.context.image_positions, &layers)
                .expect("rebuild");
            constant &= rebuilt.layers.iter().zip(&session.context.layers).all(|(a, b)| {
                a.gradient.g.iter().zip(&b.gradient.g).all(|(x, y)| x.to_bits() == y.to_bits())
            });
        }
    }
    Outcome {
        id: 3,
        name: "gradient correctness",
        passed: worst <= 1e-6 && constant,
        detail: format!("max rel FD err {worst:.2e} over 100 instances (≤1e-6), g bit-identical at steps 1 and 50: {constant}"),
    }
}

fn reference_decode(weights: &barrier_steer::model::ModelWeights, prompt: &Prompt, max_new: usize) -> (Vec<u32>, barrier_steer::model::KvCache) {
    let (last, head) = prompt.tokens.split_last().expect("text");
    let mut cache = prefill(weights, head, &prompt.images, &[]).expect("prefill").cache;
    let mut input = *last;
    let mut out = Vec::new();
    for _ in 0..max_new {
        let step = decode_step(weights, &mut cache, token_embedding(weights, input).expect("token"), &mut NoHook)
            .expect("step");
        let t = barrier_steer::model::argmax(&step.logits) as u32;
        out.push(t);
        if weights.config.eos_token == Some(t) {
            break;
        }
        input = t;
    }
    (out, cache)
}

// 4. Cached K/V come from the steered input; mode off is the plain engine.
fn cache_consistency() -> Outcome {
    let p = prepared(SEEDSET[0]);
    let options = GenerateOptions {
        capture_inputs: true,
        ..GenerateOptions::default()
    };
    let (dh, heads) = (p.weights.config.d_head, p.weights.config.n_heads);
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for i in 0..50 {
        let gen = generate(&p.weights, &p.task.prompt(i).prompt, &p.steering, &options).expect("decode");
        for (step, r) in gen.trace.records() {
            if !r.fired {
                continue;
            }
            let x = r.steered_input.as_ref().expect("captured");
            let lw = &p.weights.layers[r.layer];
            for h in 0..heads {
                let k = matvec(&lw.w_k[h], x).expect("k");
                let v = matvec(&lw.w_v[h], x).expect("v");
                let ck = gen.cache.key(r.layer, h, step.position);
                let cv = gen.cache.value(r.layer, h, step.position);
                for j in 0..dh {
                    worst = worst.max((k[j] - ck[j]).abs()).max((v[j] - cv[j]).abs());
                }
            }
            checked += 1;
        }
    }
    let mut identical = true;
    for i in 0..50 {
        let prompt = p.task.prompt(i).prompt;
        let (tokens, cache) = reference_decode(&p.weights, &prompt, GenerateOptions::default().max_new);
        let off = generate(&p.weights, &prompt, &p.steering.with_mode(SteeringMode::Off), &GenerateOptions::default())
            .expect("decode");
        identical &= off.tokens == tokens
            && (0..cache.n_layers()).all(|l| {
                (0..cache.n_heads()).all(|h| {
                    (0..cache.len()).all(|j| {
                        cache.key(l, h, j) == off.cache.key(l, h, j) && cache.value(l, h, j) == off.cache.value(l, h, j)
                    })
                })
            });
    }
    Outcome {
        id: 4,
        name: "cache consistency",
        passed: checked > 0 && worst <= 1e-12 && identical,
        detail: format!("{checked} steered (step, layer) pairs, max |K/V − W·x̃| {worst:.2e} (≤1e-12), mode off bit-identical to hook-free: {identical}"),
    }
}

// 5. Gate closed equals off; continuous always fires; firing monotone in τ.
fn selectivity() -> Outcome {
    let p = prepared(SEEDSET[0]);
    let exp = ExperimentConfig {
        n_prompts: 200,
        ..default_experiment()
    };
    let off = run_experiment(&p.task, &p.weights, &p.steering.with_mode(SteeringMode::Off), &exp).expect("off");
    let global_min = off
        .runs
        .iter()
        .flat_map(|r| r.trace.records().map(|(_, l)| l.h))
        .fold(f64::INFINITY, f64::min);
    let closed = SteeringConfig {
        tau: global_min - 1.0,
        ..p.steering.with_mode(SteeringMode::Regulated)
    };
    let gated = run_experiment(&p.task, &p.weights, &closed, &exp).expect("gated");
    let identical = gated.runs.iter().zip(&off.runs).all(|(a, b)| a.tokens == b.tokens);
    let cont = run_experiment(&p.task, &p.weights, &p.steering.with_mode(SteeringMode::Continuous), &exp).expect("cont");
    let all_fired = cont.summary.mean_fired_fraction == 1.0;

    let hs = calibration_barriers(&p.task, &p.weights, &p.steering, &exp).expect("calibration");
    let mut fractions = Vec::new();
    for q in [0.7, 0.5, 0.3, 0.2, 0.1] {
        let tau = quantile(&hs, q).expect("quantile");
        let cfg = SteeringConfig {
            tau,
            ..p.steering.with_mode(SteeringMode::Regulated)
        };
        fractions.push(run_experiment(&p.task, &p.weights, &cfg, &exp).expect("sweep").summary.mean_fired_fraction);
    }
    let monotone = fractions.windows(2).all(|w| w[1] <= w[0]);
    Outcome {
        id: 5,
        name: "selectivity",
        passed: identical && all_fired && monotone,
        detail: format!(
            "gate closed (τ = min h − 1) token-identical: {identical}, continuous fired fraction {:.4} (=1), fired fraction as τ decreases {:?} non-increasing: {monotone}",
            cont.summary.mean_fired_fraction,
            fractions.iter().map(|f| format!("{f:.4}")).collect::<Vec<_>>()
        ),
    }
}

// 6. ‖θ‖ linear in the violation and inversely proportional to ‖g‖.
fn adaptivity() -> Outcome {
    let mut rng = Rng::new(6);
    let mut lin = 0.0f64;
    let mut halving = 0.0f64;
    for _ in 0..200 {
        let g = BarrierGradient::new(seeded_gaussian(&mut rng, 64));
        let tau = rng.gaussian();
        let base = solve_correction(tau - 1.0, &g, tau, 0.0).norm();
        for k in [0.25, 0.5, 2.0, 3.0, 10.0] {
            let n = solve_correction(tau - k, &g, tau, 0.0).norm();
            lin = lin.max(rel(n, k * base));
        }
        let g2 = BarrierGradient::new(g.g.iter().map(|v| 2.0 * v).collect());
        let n2 = solve_correction(tau - 1.0, &g2, tau, 1e-300).norm();
        halving = halving.max(rel(n2, 0.5 * base));
    }
    Outcome {
        id: 6,
        name: "adaptivity",
        passed: lin <= 1e-10 && halving <= 1e-10,
        detail: format!("max linearity deviation {lin:.2e} (≤1e-10), max deviation from halving {halving:.2e}"),
    }
}

struct SeedRuns {
    off: Experiment,
    regulated: Experiment,
    q_only: Experiment,
}

fn seed_runs(seed: u64) -> SeedRuns {
    let p = prepared(seed);
    let exp = default_experiment();
    let run = |m| run_experiment(&p.task, &p.weights, &p.steering.with_mode(m), &exp).expect("experiment");
    SeedRuns {
        off: run(SteeringMode::Off),
        regulated: run(SteeringMode::Regulated),
        q_only: run(SteeringMode::QOnly),
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

// 7. Directional reduction across the seedset.
fn reduction() -> (Outcome, Vec<SeedRuns>) {
    let start = Instant::now();
    let runs: Vec<SeedRuns> = SEEDSET.iter().map(|&s| seed_runs(s)).collect();
    let elapsed = start.elapsed();
    let rate = |e: &Experiment| e.summary.hallucination_rate.expect("object tokens");
    let off = mean(runs.iter().map(|r| rate(&r.off)));
    let reg = mean(runs.iter().map(|r| rate(&r.regulated)));
    let q = mean(runs.iter().map(|r| rate(&r.q_only)));
    let rec_off = mean(runs.iter().map(|r| r.off.summary.object_recall));
    let rec_reg = mean(runs.iter().map(|r| r.regulated.summary.object_recall));
    let relative = 1.0 - reg / off;
    let recall_gap = (rec_reg - rec_off).abs();
    let reduce_ok = relative >= 0.20;
    let recall_ok = recall_gap <= 0.03;
    let xq_ok = reg <= q;
    let outcome = Outcome {
        id: 7,
        name: "directional hallucination reduction",
        passed: reduce_ok && recall_ok && xq_ok && within(elapsed, 300.0),
        detail: format!(
            "hallucination off {off:.4} regulated {reg:.4} q_only {q:.4}: relative reduction {:.1}% (≥20%) {}, recall {rec_off:.4} → {rec_reg:.4} gap {:.2} pts (≤3) {}, x ≤ q {}, {elapsed:.2?} (<300s)",
            100.0 * relative,
            if reduce_ok { "ok" } else { "FAIL" },
            100.0 * recall_gap,
            if recall_ok { "ok" } else { "FAIL" },
            if xq_ok { "ok" } else { "FAIL" },
        ),
    };
    (outcome, runs)
}

// 8. Lowest barrier bin hallucinates more than the highest.
fn ordering(off: &Experiment) -> Outcome {
    let report = bin_analysis(&object_samples(&off.runs, BarrierSource::MeanSteered)).expect("bins");
    let first = &report.bins[0];
    let last = &report.bins[N_BINS - 1];
    Outcome {
        id: 8,
        name: "barrier bin ordering",
        passed: first.rate > last.rate && first.lo > last.hi,
        detail: format!(
            "bin 1 rate {:.4} [{:.4}, {:.4}], bin 9 rate {:.4} [{:.4}, {:.4}], intervals disjoint: {}",
            first.rate,
            first.lo,
            first.hi,
            last.rate,
            last.lo,
            last.hi,
            first.lo > last.hi
        ),
    }
}

// 9. Linear overhead in the steered-layer count and bounded slowdown.
fn throughput() -> Outcome {
    let start = Instant::now();
    let p = prepared(SEEDSET[0]);
    let bench = BenchConfig::default();
    let prompts: Vec<Prompt> = (0..=bench.n_runs).map(|i| p.task.prompt(i).prompt).collect();
    let outcome = throughput_bench(&p.weights, &prompts, &p.steering, &bench);
    let elapsed = start.elapsed();
    match outcome {
        Ok(t) => {
            let r2 = t.overhead.fit.r_squared;
            let ratio = t.steered_vs_unsteered.ratio;
            Outcome {
                id: 9,
                name: "complexity and throughput",
                passed: r2 >= 0.9 && t.overhead.fit.slope > 0.0 && ratio >= 0.6 && within(elapsed, 120.0),
                detail: format!(
                    "overhead slope {:.1} ns/layer R² {r2:.4} (≥0.9), throughput ratio {ratio:.4} (≥0.6), {elapsed:.2?} (<120s)",
                    t.overhead.fit.slope
                ),
            }
        }
        Err(e) => Outcome {
            id: 9,
            name: "complexity and throughput",
            passed: false,
            detail: format!("benchmark error: {e}"),
        },
    }
}

fn wilson_closed_form(k: u64, n: u64, z: f64) -> (f64, f64) {
    let (k, n) = (k as f64, n as f64);
    let p = k / n;
    let c = (p + z * z / (2.0 * n)) / (1.0 + z * z / n);
    let w = z / (1.0 + z * z / n) * (p * (1.0 - p) / n + z * z / (4.0 * n * n)).sqrt();
    ((c - w).max(0.0), (c + w).min(1.0))
}

// 10. Wilson intervals and balanced bins.
fn statistics() -> Outcome {
    let mut rng = Rng::new(10);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let n = 1 + rng.below(500) as u64;
        let k = rng.below(n as usize + 1) as u64;
        let (lo, hi) = wilson_interval(k, n, Z_95).expect("wilson");
        let (elo, ehi) = wilson_closed_form(k, n, Z_95);
        worst = worst.max((lo - elo).abs()).max((hi - ehi).abs());
    }
    let mut balanced = true;
    for n in [9usize, 10, 17, 100, 1001] {
        let samples: Vec<(f64, bool)> = (0..n).map(|i| (rng.gaussian(), i % 4 == 0)).collect();
        let r = bin_analysis(&samples).expect("bins");
        let counts: Vec<u64> = r.bins.iter().map(|b| b.count).collect();
        balanced &= counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1
            && counts.iter().sum::<u64>() == n as u64;
    }
    Outcome {
        id: 10,
        name: "statistics",
        passed: worst <= 1e-10 && balanced,
        detail: format!("max |Wilson − closed form| {worst:.2e} over 50 pairs (≤1e-10), bins balanced within ±1: {balanced}"),
    }
}

#[test]
fn acceptance_criteria() {
    let mut outcomes = Vec::new();
    let mut report = |o: Outcome| {
        println!("{} {:>2} {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.id, o.name, o.detail);
        outcomes.push((o.id, o.passed));
    };
    report(kkt());
    report(restoration());
    report(gradient());
    report(cache_consistency());
    report(selectivity());
    report(adaptivity());
    let (seven, runs) = reduction();
    report(seven);
    report(ordering(&runs[0].off));
    drop(runs);
    report(throughput());
    report(statistics());
    let failed: Vec<u32> = outcomes.iter().filter(|(_, ok)| !ok).map(|(id, _)| *id).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

#[test]
fn seedset_decodes_are_reproducible() {
    let p = prepared(SEEDSET[1]);
    let exp = default_experiment();
    let a = run_prompt(&p.task, &p.weights, &p.task.prompt(3), &p.steering, &exp).expect("decode");
    let b = run_prompt(&p.task, &p.weights, &p.task.prompt(3), &p.steering, &exp).expect("decode");
    assert_eq!(a.tokens, b.tokens);
}
