// SPDX-License-Identifier: MIT OR Apache-2.0

//! End-to-end runs over task prompts, labeling and summary metrics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::task::{SyntheticTask, TaskPrompt};
use crate::model::{generate, GenerateOptions, ModelWeights, SamplingPolicy};
use crate::steering::{SteeringConfig, SteeringMode};
use crate::trace::DecodeTrace;

/// Prompt indices at or above this offset are reserved for τ calibration.
pub const CALIBRATION_OFFSET: usize = 1 << 40;

/// Per-token label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    /// Not an object token (EOS or a special token).
    Other,
    Grounded,
    Hallucinated,
}

impl Label {
    #[must_use]
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Other => "other",
            Self::Grounded => "grounded",
            Self::Hallucinated => "hallucinated",
        }
    }
}

/// Experiment knobs other than the steering config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub n_prompts: usize,
    /// Index of the first evaluation prompt.
    pub first_prompt: usize,
    pub max_new: usize,
    pub policy: SamplingPolicy,
    /// Seed of the sampling stream; prompt `i` uses `seed + i`.
    pub seed: u64,
    /// Prompts used to pick the default τ.
    pub calibration_prompts: usize,
    /// Quantile of the first-step barrier distribution used as default τ.
    pub calibration_quantile: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            n_prompts: 500,
            first_prompt: 0,
            max_new: crate::model::DEFAULT_MAX_NEW,
            policy: SamplingPolicy::Greedy,
            seed: 0,
            calibration_prompts: 32,
            calibration_quantile: 0.3,
        }
    }
}

impl ExperimentConfig {
    /// # Errors
    ///
    /// [`Error::Config`] for an empty run or a quantile outside `[0, 1]`.
    pub fn validate(&self) -> Result<()> {
        if self.n_prompts == 0 {
            return Err(Error::Config("n_prompts must be at least 1".into()));
        }
        if self.max_new == 0 {
            return Err(Error::Config("max_new must be at least 1".into()));
        }
        if self.calibration_prompts == 0 {
            return Err(Error::Config("calibration_prompts must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.calibration_quantile) {
            return Err(Error::Config("calibration_quantile must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// One decoded prompt with labels.
#[derive(Debug, Clone)]
pub struct PromptRun {
    pub index: usize,
    pub objects: Vec<u32>,
    pub tokens: Vec<u32>,
    pub labels: Vec<Label>,
    pub trace: DecodeTrace,
}

impl PromptRun {
    /// Distinct grounded objects mentioned.
    #[must_use]
    pub fn recalled(&self) -> usize {
        let mut seen: Vec<u32> = self
            .tokens
            .iter()
            .zip(&self.labels)
            .filter(|(_, l)| **l == Label::Grounded)
            .map(|(t, _)| *t)
            .collect();
        seen.sort_unstable();
        seen.dedup();
        seen.len()
    }
}

/// Aggregate metrics of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mode: SteeringMode,
    pub tau: f64,
    pub alpha: f64,
    pub n_prompts: usize,
    pub object_tokens: u64,
    pub hallucinated_tokens: u64,
    /// `None` when no object token was emitted.
    pub hallucination_rate: Option<f64>,
    pub object_recall: f64,
    pub mean_fired_fraction: f64,
    pub mean_length: f64,
}

/// Runs plus their summary.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub steering: SteeringConfig,
    pub runs: Vec<PromptRun>,
    pub summary: Summary,
}

/// Label every emitted token against the prompt's object set.
#[must_use]
pub fn label_tokens(task: &SyntheticTask, objects: &[u32], tokens: &[u32]) -> Vec<Label> {
    tokens
        .iter()
        .map(|&t| {
            if !task.is_object(t) {
                Label::Other
            } else if objects.binary_search(&t).is_ok() {
                Label::Grounded
            } else {
                Label::Hallucinated
            }
        })
        .collect()
}

/// Decode one prompt.
///
/// # Errors
///
/// Propagates generation errors.
pub fn run_prompt(
    task: &SyntheticTask,
    weights: &ModelWeights,
    prompt: &TaskPrompt,
    steering: &SteeringConfig,
    experiment: &ExperimentConfig,
) -> Result<PromptRun> {
    let options = GenerateOptions {
        max_new: experiment.max_new,
        policy: experiment.policy,
        seed: experiment.seed.wrapping_add(prompt.index as u64),
        ..GenerateOptions::default()
    };
    let generation = generate(weights, &prompt.prompt, steering, &options)?;
    let labels = label_tokens(task, &prompt.objects, &generation.tokens);
    Ok(PromptRun {
        index: prompt.index,
        objects: prompt.objects.clone(),
        tokens: generation.tokens,
        labels,
        trace: generation.trace,
    })
}

/// Decode `n_prompts` prompts in parallel and summarize.
///
/// Runs are returned in prompt order, so the output does not depend on the
/// thread count.
///
/// # Errors
///
/// [`Error::Config`] for invalid configs, otherwise the first failing prompt's error.
pub fn run_experiment(
    task: &SyntheticTask,
    weights: &ModelWeights,
    steering: &SteeringConfig,
    experiment: &ExperimentConfig,
) -> Result<Experiment> {
    experiment.validate()?;
    steering.validate(weights.config.n_layers)?;
    let runs = (experiment.first_prompt..experiment.first_prompt + experiment.n_prompts)
        .into_par_iter()
        .map(|i| run_prompt(task, weights, &task.prompt(i), steering, experiment))
        .collect::<Result<Vec<_>>>()?;
    let summary = summarize(steering, &runs);
    Ok(Experiment {
        steering: steering.clone(),
        runs,
        summary,
    })
}

/// Hallucinated object tokens over all object tokens; `None` for 0/0.
#[must_use]
pub fn hallucination_rate(runs: &[PromptRun]) -> Option<f64> {
    let (objects, bad) = object_counts(runs);
    (objects > 0).then(|| bad as f64 / objects as f64)
}

fn object_counts(runs: &[PromptRun]) -> (u64, u64) {
    runs.iter()
        .flat_map(|r| &r.labels)
        .fold((0, 0), |(n, k), l| match l {
            Label::Other => (n, k),
            Label::Grounded => (n + 1, k),
            Label::Hallucinated => (n + 1, k + 1),
        })
}

/// Instance-level recall: distinct grounded objects mentioned, summed over
/// prompts, over the total number of ground-truth objects.
#[must_use]
pub fn object_recall(runs: &[PromptRun]) -> f64 {
    let truth: usize = runs.iter().map(|r| r.objects.len()).sum();
    if truth == 0 {
        return 0.0;
    }
    runs.iter().map(PromptRun::recalled).sum::<usize>() as f64 / truth as f64
}

/// Firing statistics over traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selectivity {
    /// Mean number of steered layers that fired per step.
    pub mean_fired_layers: f64,
    /// Fired (step, layer) decisions over all decisions.
    pub fired_fraction: f64,
    /// `(layer, firing rate)`, ascending by layer.
    pub per_layer: Vec<(usize, f64)>,
}

/// Firing statistics; all zero for traces without steered decisions.
#[must_use]
pub fn selectivity_stats<'a>(traces: impl IntoIterator<Item = &'a DecodeTrace>) -> Selectivity {
    let mut steps = 0u64;
    let mut decisions = 0u64;
    let mut fired = 0u64;
    let mut per_layer: std::collections::BTreeMap<usize, (u64, u64)> = Default::default();
    for trace in traces {
        for step in &trace.steps {
            steps += 1;
            for r in &step.layers {
                decisions += 1;
                let e = per_layer.entry(r.layer).or_default();
                e.1 += 1;
                if r.fired {
                    fired += 1;
                    e.0 += 1;
                }
            }
        }
    }
    let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Selectivity {
        mean_fired_layers: ratio(fired, steps),
        fired_fraction: ratio(fired, decisions),
        per_layer: per_layer
            .into_iter()
            .map(|(l, (f, n))| (l, ratio(f, n)))
            .collect(),
    }
}

/// Summary metrics of `runs` produced under `steering`.
#[must_use]
pub fn summarize(steering: &SteeringConfig, runs: &[PromptRun]) -> Summary {
    let (objects, bad) = object_counts(runs);
    let steps: usize = runs.iter().map(|r| r.tokens.len()).sum();
    Summary {
        mode: steering.mode,
        tau: steering.tau,
        alpha: steering.alpha,
        n_prompts: runs.len(),
        object_tokens: objects,
        hallucinated_tokens: bad,
        hallucination_rate: hallucination_rate(runs),
        object_recall: object_recall(runs),
        mean_fired_fraction: selectivity_stats(runs.iter().map(|r| &r.trace)).fired_fraction,
        mean_length: if runs.is_empty() {
            0.0
        } else {
            steps as f64 / runs.len() as f64
        },
    }
}

/// Linear-interpolated quantile of `values` (`q ∈ [0, 1]`).
///
/// # Errors
///
/// [`Error::Empty`] for no values, [`Error::NonFinite`] for NaN input.
pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("quantile input"));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("quantile input".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

/// First-step barriers at every steered layer over the calibration
/// prompts, decoded without steering, in prompt then layer order.
///
/// # Errors
///
/// Propagates generation errors.
pub fn calibration_barriers(
    task: &SyntheticTask,
    weights: &ModelWeights,
    steering: &SteeringConfig,
    experiment: &ExperimentConfig,
) -> Result<Vec<f64>> {
    experiment.validate()?;
    let observe = SteeringConfig {
        mode: SteeringMode::Off,
        ..steering.clone()
    };
    let probe = ExperimentConfig {
        max_new: 1,
        ..experiment.clone()
    };
    let barriers = (0..experiment.calibration_prompts)
        .into_par_iter()
        .map(|i| {
            let run = run_prompt(task, weights, &task.prompt(CALIBRATION_OFFSET + i), &observe, &probe)?;
            Ok(run.trace.steps[0].layers.iter().map(|r| r.h).collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(barriers.into_iter().flatten().collect())
}

/// Default τ: the configured quantile of [`calibration_barriers`].
///
/// # Errors
///
/// Propagates generation errors.
pub fn calibrate_tau(
    task: &SyntheticTask,
    weights: &ModelWeights,
    steering: &SteeringConfig,
    experiment: &ExperimentConfig,
) -> Result<f64> {
    let flat = calibration_barriers(task, weights, steering, experiment)?;
    quantile(&flat, experiment.calibration_quantile)
}

/// Mean barrier per step index over runs that reached that step.
#[must_use]
pub fn barrier_by_step(runs: &[PromptRun]) -> Vec<(usize, f64, usize)> {
    let mut acc: Vec<(f64, usize)> = Vec::new();
    for run in runs {
        for s in &run.trace.steps {
            if let Some(h) = s.mean_barrier() {
                if acc.len() <= s.step {
                    acc.resize(s.step + 1, (0.0, 0));
                }
                acc[s.step].0 += h;
                acc[s.step].1 += 1;
            }
        }
    }
    acc.into_iter()
        .enumerate()
        .filter(|(_, (_, n))| *n > 0)
        .map(|(i, (sum, n))| (i, sum / n as f64, n))
        .collect()
}
