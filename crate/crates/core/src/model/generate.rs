// SPDX-License-Identifier: MIT OR Apache-2.0

//! The steered decode loop.
//!
//! The prompt is laid out as image embeddings followed by text tokens.
//! Everything except the last text token is prefilled without steering; the
//! last text token is fed as step 0, so every emitted token comes from a
//! step on which the controller ran.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    decode_step, prefill, sample, token_embedding, KvCache, ModelWeights, PrefillContext,
    SamplingPolicy,
};
use crate::numeric::Rng;
use crate::steering::{SteeringConfig, Steerer};
use crate::trace::{DecodeTrace, StepRecord};

/// Default generation length.
pub const DEFAULT_MAX_NEW: usize = 140;

/// Image embeddings plus text tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prompt {
    pub images: Vec<Vec<f64>>,
    pub tokens: Vec<u32>,
}

/// Knobs of [`generate`] that are not steering parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerateOptions {
    pub max_new: usize,
    pub policy: SamplingPolicy,
    /// Seed for the sampling stream; unused under greedy decoding.
    pub seed: u64,
    /// Keep steered attention inputs in the trace.
    pub capture_inputs: bool,
    /// Record per-step wall time and hook time.
    pub timed: bool,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            max_new: DEFAULT_MAX_NEW,
            policy: SamplingPolicy::Greedy,
            seed: 0,
            capture_inputs: false,
            timed: false,
        }
    }
}

/// Result of [`generate`].
#[derive(Debug, Clone)]
pub struct Generation {
    /// Emitted tokens, including a trailing EOS if one was produced.
    pub tokens: Vec<u32>,
    pub trace: DecodeTrace,
    /// Cache after the last step.
    pub cache: KvCache,
    pub context: PrefillContext,
}

/// A prefilled prompt ready for step-by-step decoding.
#[derive(Debug, Clone)]
pub struct Session<'w> {
    weights: &'w ModelWeights,
    pub cache: KvCache,
    pub context: PrefillContext,
    next: u32,
}

impl<'w> Session<'w> {
    /// Prefill `prompt` minus its last text token.
    ///
    /// # Errors
    ///
    /// [`Error::Config`] for a prompt without text tokens or an invalid
    /// layer set, plus any prefill error.
    pub fn start(weights: &'w ModelWeights, prompt: &Prompt, steered_layers: &[usize]) -> Result<Self> {
        let Some((&last, head)) = prompt.tokens.split_last() else {
            return Err(Error::Config("prompt needs at least one text token".into()));
        };
        let pre = prefill(weights, head, &prompt.images, steered_layers)?;
        Ok(Self {
            weights,
            cache: pre.cache,
            context: pre.context,
            next: last,
        })
    }

    /// Token that the next [`Session::step`] feeds.
    #[must_use]
    pub fn next_input(&self) -> u32 {
        self.next
    }

    /// Run one step with `steerer`, returning the logits. The caller chooses
    /// the next input with [`Session::feed`].
    ///
    /// # Errors
    ///
    /// Any forward-pass error.
    pub fn step(&mut self, config: &SteeringConfig, capture: bool) -> Result<(Vec<f64>, StepRecord)> {
        let position = self.cache.len();
        let mut steerer = Steerer::new(&self.context, config).capture_inputs(capture);
        let emb = token_embedding(self.weights, self.next)?;
        let out = decode_step(self.weights, &mut self.cache, emb, &mut steerer)?;
        let record = StepRecord {
            step: 0,
            position,
            token: 0,
            layers: steerer.take_records(),
            elapsed_nanos: 0,
            hook_nanos: 0,
        };
        Ok((out.logits, record))
    }

    pub fn feed(&mut self, token: u32) {
        self.next = token;
    }
}

/// Generate up to `options.max_new` tokens with steering.
///
/// Greedy generation is a pure function of the weights, prompt and configs.
///
/// # Errors
///
/// Invalid steering config, prompt problems, or forward-pass failures such
/// as running past `max_seq`.
pub fn generate(
    weights: &ModelWeights,
    prompt: &Prompt,
    steering: &SteeringConfig,
    options: &GenerateOptions,
) -> Result<Generation> {
    steering.validate(weights.config.n_layers)?;
    let Some((&last, head)) = prompt.tokens.split_last() else {
        return Err(Error::Config("prompt needs at least one text token".into()));
    };
    let pre = prefill(weights, head, &prompt.images, &steering.steered_layers)?;
    let mut cache = pre.cache;
    let context = pre.context;
    let mut rng = Rng::new(options.seed);
    let mut steerer = Steerer::new(&context, steering)
        .capture_inputs(options.capture_inputs)
        .timed(options.timed);

    let mut tokens = Vec::with_capacity(options.max_new);
    let mut trace = DecodeTrace::default();
    let mut input = last;
    for step in 0..options.max_new {
        let start = options.timed.then(Instant::now);
        let position = cache.len();
        let emb = token_embedding(weights, input)?;
        let out = decode_step(weights, &mut cache, emb, &mut steerer)?;
        let token = sample(&out.logits, &options.policy, &mut rng);
        let elapsed_nanos = start.map_or(0, |t| t.elapsed().as_nanos() as u64);
        trace.steps.push(StepRecord {
            step,
            position,
            token,
            layers: steerer.take_records(),
            elapsed_nanos,
            hook_nanos: steerer.take_hook_nanos(),
        });
        tokens.push(token);
        if weights.config.eos_token == Some(token) {
            break;
        }
        input = token;
    }
    drop(steerer);
    Ok(Generation {
        tokens,
        trace,
        cache,
        context,
    })
}
