// SPDX-License-Identifier: MIT OR Apache-2.0

//! Decode throughput and steering overhead measurements.
//!
//! Everything here runs on the calling thread; do not call it from inside a
//! rayon pool that is busy with other work.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::stats::{linear_fit, LinearFit};
use crate::model::{generate, init_model, GenerateOptions, ModelConfig, ModelWeights, Prompt, Session};
use crate::numeric::{seeded_gaussian, Rng};
use crate::steering::{steering_hook, SteeringConfig, SteeringMode};

/// Smallest total duration a timed configuration must span, as a multiple of
/// the measured timer granularity.
const MIN_RESOLUTION_MULTIPLE: f64 = 1000.0;

/// End-to-end comparison of two steering configs on the same prompts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputComparison {
    pub label_a: String,
    pub label_b: String,
    pub n_tokens: usize,
    /// Timed runs per config (the warm-up run is not counted).
    pub n_runs: usize,
    pub tokens_per_sec_a: f64,
    pub tokens_per_sec_b: f64,
    /// `tokens_per_sec_b / tokens_per_sec_a`.
    pub ratio: f64,
}

/// Per-step steering overhead at one steered-layer count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverheadPoint {
    pub steered_layers: usize,
    pub nanos_per_step: f64,
}

/// Overhead scaling in the number of steered layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverheadScaling {
    pub n_layers: usize,
    pub points: Vec<OverheadPoint>,
    pub fit: LinearFit,
}

/// Multiply-add counts per decode step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Complexity {
    /// Unsteered forward step at context length `context`.
    pub context: usize,
    pub base_step: u64,
    /// Added per step with a cached gradient: one dot product and one axpy per layer.
    pub steer_step_cached: u64,
    /// Added per step when `W_Qᵀ S` is re-evaluated every step.
    pub steer_step_recomputed: u64,
    /// One-off cost at prefill: key sums and `W_Qᵀ S` per steered layer.
    pub steer_prefill: u64,
}

/// Analytic multiply-add counts for `model` with `steered` steered layers.
#[must_use]
pub fn complexity(model: &ModelConfig, steered: usize, n_image: usize, context: usize) -> Complexity {
    let d = model.d_model as u64;
    let h = model.n_heads as u64;
    let dh = model.d_head as u64;
    let f = model.d_ff as u64;
    let n = context as u64;
    let l = model.n_layers as u64;
    let s = steered as u64;
    let per_layer = 3 * h * dh * d + 2 * h * dh * n + d * h * dh + 2 * d * f;
    Complexity {
        context,
        base_step: l * per_layer + model.vocab_size as u64 * d,
        steer_step_cached: s * 2 * d,
        steer_step_recomputed: s * (h * dh * d + 2 * d),
        steer_prefill: s * (h * dh * n_image as u64 + h * dh * d),
    }
}

/// Rough granularity of [`Instant`]: the smallest nonzero difference seen
/// between consecutive reads.
#[must_use]
pub fn timer_granularity() -> Duration {
    let mut best = Duration::MAX;
    for _ in 0..1000 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min(b - a);
    }
    best
}

fn check_resolution(total: Duration, what: &str) -> Result<()> {
    let g = timer_granularity().as_secs_f64();
    if total.as_secs_f64() < g * MIN_RESOLUTION_MULTIPLE {
        return Err(Error::TimerResolution(format!(
            "{what} took {:?}, under {MIN_RESOLUTION_MULTIPLE}x the timer granularity {g:.2e}s",
            total
        )));
    }
    Ok(())
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Weights with EOS disabled so every run emits exactly `n_tokens`.
fn without_eos(weights: &ModelWeights) -> ModelWeights {
    let mut w = weights.clone();
    w.config.eos_token = None;
    w
}

/// Time `generate` for two configs over the same prompts, alternating
/// which goes first, and compare median wall times.
///
/// Each prompt is one run; one extra leading prompt is a discarded warm-up.
///
/// # Errors
///
/// [`Error::Config`] for too few prompts or `n_tokens = 0`,
/// [`Error::TimerResolution`] when a run is too short to time, or any
/// generation error.
pub fn compare_throughput(
    weights: &ModelWeights,
    prompts: &[Prompt],
    (label_a, a): (&str, &SteeringConfig),
    (label_b, b): (&str, &SteeringConfig),
    n_tokens: usize,
) -> Result<ThroughputComparison> {
    if prompts.len() < 2 {
        return Err(Error::Config("throughput needs a warm-up prompt and at least one timed prompt".into()));
    }
    if n_tokens == 0 {
        return Err(Error::Config("n_tokens must be at least 1".into()));
    }
    let w = without_eos(weights);
    let options = GenerateOptions {
        max_new: n_tokens,
        ..GenerateOptions::default()
    };
    let time = |cfg: &SteeringConfig, p: &Prompt| -> Result<Duration> {
        let t = Instant::now();
        let out = generate(&w, p, cfg, &options)?;
        let elapsed = t.elapsed();
        std::hint::black_box(out.tokens);
        Ok(elapsed)
    };
    time(a, &prompts[0])?;
    time(b, &prompts[0])?;
    let mut ta = Vec::with_capacity(prompts.len() - 1);
    let mut tb = Vec::with_capacity(prompts.len() - 1);
    for (i, p) in prompts[1..].iter().enumerate() {
        if i % 2 == 0 {
            ta.push(time(a, p)?);
            tb.push(time(b, p)?);
        } else {
            tb.push(time(b, p)?);
            ta.push(time(a, p)?);
        }
    }
    let shortest = ta.iter().chain(&tb).min().copied().unwrap_or_default();
    check_resolution(shortest, "a decode run")?;
    let mut sa: Vec<f64> = ta.iter().map(Duration::as_secs_f64).collect();
    let mut sb: Vec<f64> = tb.iter().map(Duration::as_secs_f64).collect();
    let (ma, mb) = (median(&mut sa), median(&mut sb));
    let tps_a = n_tokens as f64 / ma;
    let tps_b = n_tokens as f64 / mb;
    Ok(ThroughputComparison {
        label_a: label_a.to_string(),
        label_b: label_b.to_string(),
        n_tokens,
        n_runs: prompts.len() - 1,
        tokens_per_sec_a: tps_a,
        tokens_per_sec_b: tps_b,
        ratio: tps_b / tps_a,
    })
}

/// `count` layer indices spread evenly over `0..n_layers`.
#[must_use]
pub fn spread_layers(n_layers: usize, count: usize) -> Vec<usize> {
    let count = count.min(n_layers);
    (0..count).map(|i| i * n_layers / count).collect()
}

/// Random prompts for a model without a task: `n_image` Gaussian image
/// vectors and two random text tokens.
#[must_use]
pub fn random_prompts(config: &ModelConfig, n: usize, n_image: usize, seed: u64) -> Vec<Prompt> {
    let mut rng = Rng::new(seed);
    (0..n)
        .map(|_| Prompt {
            images: (0..n_image)
                .map(|_| seeded_gaussian(&mut rng, config.d_model))
                .collect(),
            tokens: (0..2).map(|_| rng.below(config.vocab_size) as u32).collect(),
        })
        .collect()
}

/// Per-step cost of the steering controller at each steered-layer count on
/// an `n_layers`-deep model at the default width.
///
/// For each count, one prompt is decoded for `n_tokens` steps without
/// steering to collect real attention inputs at the steered layers. The
/// controller is then timed over those inputs `repeats` times; a step's
/// overhead is the time to steer every steered layer once. The inputs are
/// copied into a scratch buffer first, as the decoder would hand them over.
///
/// # Errors
///
/// [`Error::Config`] for an empty grid or counts above `n_layers`,
/// [`Error::TimerResolution`] when the smallest configuration is too short
/// to time, or any decode error.
pub fn overhead_scaling(
    n_layers: usize,
    counts: &[usize],
    steering: &SteeringConfig,
    n_tokens: usize,
    repeats: usize,
) -> Result<OverheadScaling> {
    if counts.is_empty() || counts.iter().any(|&c| c == 0 || c > n_layers) {
        return Err(Error::Config(format!(
            "steered-layer counts must be in 1..={n_layers}"
        )));
    }
    let config = ModelConfig {
        n_layers,
        ..ModelConfig::default()
    };
    let weights = without_eos(&init_model(&config)?);
    let prompt = random_prompts(&config, 1, 8, config.seed ^ 0xbe9c)
        .pop()
        .ok_or(Error::Empty("prompts"))?;
    let mut points = Vec::with_capacity(counts.len());
    for &count in counts {
        let layers = spread_layers(n_layers, count);
        let cfg = SteeringConfig {
            steered_layers: layers.clone(),
            ..steering.clone()
        };
        cfg.validate(n_layers)?;
        let observe = cfg.with_mode(SteeringMode::Off);
        let mut session = Session::start(&weights, &prompt, &layers)?;
        let mut inputs: Vec<(usize, Vec<f64>)> = Vec::with_capacity(n_tokens * count);
        for _ in 0..n_tokens {
            let (logits, record) = session.step(&observe, true)?;
            for r in record.layers {
                let x = r.steered_input.ok_or(Error::Empty("captured input"))?;
                inputs.push((r.layer, x));
            }
            session.feed(crate::model::argmax(&logits) as u32);
        }
        let steered: Vec<_> = layers
            .iter()
            .map(|&l| session.context.layer(l).ok_or(Error::Empty("steered layer")))
            .collect::<Result<_>>()?;
        let mut scratch = vec![0.0; config.d_model];
        let mut fired = 0usize;
        let mut run = || {
            for (i, (_, x)) in inputs.iter().enumerate() {
                scratch.copy_from_slice(x);
                let (rec, _) = steering_hook(&cfg, steered[i % count], &mut scratch);
                fired += usize::from(rec.fired);
            }
            std::hint::black_box(&scratch);
        };
        run();
        let t = Instant::now();
        for _ in 0..repeats {
            run();
        }
        let total = t.elapsed();
        std::hint::black_box(fired);
        check_resolution(total, "the overhead loop")?;
        points.push(OverheadPoint {
            steered_layers: count,
            nanos_per_step: total.as_nanos() as f64 / (repeats * n_tokens) as f64,
        });
    }
    let x: Vec<f64> = points.iter().map(|p| p.steered_layers as f64).collect();
    let y: Vec<f64> = points.iter().map(|p| p.nanos_per_step).collect();
    let fit = linear_fit(&x, &y)?;
    Ok(OverheadScaling {
        n_layers,
        points,
        fit,
    })
}

/// Full throughput report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputReport {
    /// Unsteered vs steered on the configured model.
    pub steered_vs_unsteered: ThroughputComparison,
    pub overhead: OverheadScaling,
    pub complexity: Complexity,
}

/// Settings of [`throughput_bench`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub n_tokens: usize,
    pub n_runs: usize,
    /// Depth of the model used for overhead scaling.
    pub scaling_layers: usize,
    pub scaling_counts: Vec<usize>,
    pub scaling_repeats: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            n_tokens: 50,
            n_runs: 30,
            scaling_layers: 16,
            scaling_counts: vec![2, 4, 8, 16],
            scaling_repeats: 200,
        }
    }
}

/// Steered vs unsteered throughput on `prompts`, plus overhead scaling and
/// analytic counts.
///
/// "Unsteered" decodes with no steered layers at all, so the prefill skips
/// the gradient as well.
///
/// # Errors
///
/// As [`compare_throughput`] and [`overhead_scaling`].
pub fn throughput_bench(
    weights: &ModelWeights,
    prompts: &[Prompt],
    steering: &SteeringConfig,
    bench: &BenchConfig,
) -> Result<ThroughputReport> {
    if prompts.len() < bench.n_runs + 1 {
        return Err(Error::Config(format!(
            "need {} prompts for {} timed runs plus warm-up",
            bench.n_runs + 1,
            bench.n_runs
        )));
    }
    let unsteered = SteeringConfig {
        steered_layers: Vec::new(),
        mode: SteeringMode::Off,
        ..steering.clone()
    };
    let steered_vs_unsteered = compare_throughput(
        weights,
        &prompts[..=bench.n_runs],
        ("unsteered", &unsteered),
        (steering.mode.as_str(), steering),
        bench.n_tokens,
    )?;
    let overhead = overhead_scaling(
        bench.scaling_layers,
        &bench.scaling_counts,
        steering,
        bench.n_tokens,
        bench.scaling_repeats,
    )?;
    let n_image = prompts[0].images.len();
    let context = n_image + prompts[0].tokens.len() + bench.n_tokens / 2;
    Ok(ThroughputReport {
        steered_vs_unsteered,
        overhead,
        complexity: complexity(&weights.config, steering.steered_layers.len(), n_image, context),
    })
}
