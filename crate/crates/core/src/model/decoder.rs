// SPDX-License-Identifier: MIT OR Apache-2.0

//! Single-position forward pass and prompt prefill.
//!
//! Per block: `norm → hook → Q/K/V → append K/V → causal attention → W_O →
//! residual add → norm → FFN (ReLU) → residual add`. The hook sees the
//! post-norm attention input, which is the vector the projections consume.

use crate::error::{Error, Result};
use crate::model::{KvCache, ModelWeights, PrefillContext};
use crate::numeric::{layer_norm_into, matvec_into, softmax_in_place};

/// Interception points inside one decode step.
///
/// Both methods default to no-ops, so an implementation only overrides the
/// point it steers.
pub trait StepHook {
    /// Post-norm attention input of `layer`, before the Q/K/V projections.
    /// Changes made here reach the query and the cached key and value.
    fn steer_input(&mut self, _layer: usize, _x: &mut [f64]) {}

    /// Concatenated per-head queries of `layer`, after projection and after
    /// the current key/value were written to the cache.
    fn steer_queries(&mut self, _layer: usize, _queries: &mut [f64]) {}
}

/// Hook that never touches anything.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoHook;

impl StepHook for NoHook {}

/// Logits and final residual state for one position.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub logits: Vec<f64>,
    pub hidden: Vec<f64>,
}

/// Run one position through the decoder and append its keys/values.
///
/// `x_in` is the raw input embedding (a token row or an image vector); the
/// positional row for `cache.len()` is added here.
///
/// # Errors
///
/// [`Error::SequenceOverflow`] when the cache is full, [`Error::Shape`] for a
/// wrong-length input, [`Error::NonFinite`] if the logits contain NaN/Inf.
pub fn decode_step<H: StepHook + ?Sized>(
    weights: &ModelWeights,
    cache: &mut KvCache,
    x_in: &[f64],
    hook: &mut H,
) -> Result<StepOutput> {
    let cfg = &weights.config;
    let d = cfg.d_model;
    let (n_heads, d_head) = (cfg.n_heads, cfg.d_head);
    let pos = cache.len();
    if pos >= cfg.max_seq {
        return Err(Error::SequenceOverflow {
            requested: pos + 1,
            max: cfg.max_seq,
        });
    }
    if x_in.len() != d {
        return Err(Error::Shape {
            op: "decode_step",
            expected: d,
            got: x_in.len(),
        });
    }

    let mut resid = x_in.to_vec();
    weights.add_position(&mut resid, pos)?;

    let width = cfg.attn_width();
    let scale = 1.0 / (d_head as f64).sqrt();
    let mut normed = vec![0.0; d];
    let mut q = vec![0.0; width];
    let mut k = vec![0.0; width];
    let mut v = vec![0.0; width];
    let mut heads_out = vec![0.0; width];
    let mut proj = vec![0.0; d];
    let mut ff_hidden = vec![0.0; cfg.d_ff];
    let mut scores = Vec::with_capacity(pos + 1);

    for (l, layer) in weights.layers.iter().enumerate() {
        layer_norm_into(&resid, &layer.attn_norm, &mut normed)?;
        hook.steer_input(l, &mut normed);

        for h in 0..n_heads {
            let span = h * d_head..(h + 1) * d_head;
            matvec_into(&layer.w_q[h], &normed, &mut q[span.clone()])?;
            matvec_into(&layer.w_k[h], &normed, &mut k[span.clone()])?;
            matvec_into(&layer.w_v[h], &normed, &mut v[span])?;
        }
        cache.push(l, &k, &v);
        hook.steer_queries(l, &mut q);

        let n = pos + 1;
        for h in 0..n_heads {
            let qh = &q[h * d_head..(h + 1) * d_head];
            scores.clear();
            scores.extend((0..n).map(|j| {
                cache
                    .key(l, h, j)
                    .iter()
                    .zip(qh)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    * scale
            }));
            softmax_in_place(&mut scores)?;
            let out = &mut heads_out[h * d_head..(h + 1) * d_head];
            out.fill(0.0);
            for (j, &wgt) in scores.iter().enumerate() {
                for (o, vv) in out.iter_mut().zip(cache.value(l, h, j)) {
                    *o += wgt * vv;
                }
            }
        }
        matvec_into(&layer.w_o, &heads_out, &mut proj)?;
        for (r, p) in resid.iter_mut().zip(&proj) {
            *r += p;
        }

        layer_norm_into(&resid, &layer.ffn_norm, &mut normed)?;
        matvec_into(&layer.ffn_in, &normed, &mut ff_hidden)?;
        for a in &mut ff_hidden {
            *a = a.max(0.0);
        }
        matvec_into(&layer.ffn_out, &ff_hidden, &mut proj)?;
        for (r, p) in resid.iter_mut().zip(&proj) {
            *r += p;
        }
    }
    cache.commit();

    layer_norm_into(&resid, &weights.final_norm, &mut normed)?;
    let mut logits = vec![0.0; cfg.vocab_size];
    matvec_into(&weights.lm_head, &normed, &mut logits)?;
    for (z, b) in logits.iter_mut().zip(&weights.logit_bias) {
        *z += b;
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::NonFinite(format!("logits at position {pos}")));
    }
    Ok(StepOutput {
        logits,
        hidden: resid,
    })
}

/// Cache and constants produced by [`prefill`].
#[derive(Debug, Clone)]
pub struct Prefill {
    pub cache: KvCache,
    pub context: PrefillContext,
    /// Final residual state of the last prompt position.
    pub last_hidden: Vec<f64>,
    pub last_logits: Vec<f64>,
}

/// Encode `image_embeddings` (positions `0..n_img`) followed by `prompt_tokens`.
///
/// Prefill is never steered. Afterwards the image-key sums and barrier
/// gradients are computed for every layer in `steered_layers`.
///
/// # Errors
///
/// [`Error::NoImageTokens`] for an empty image list, [`Error::SequenceOverflow`]
/// when the prompt does not fit, plus any forward-pass error.
pub fn prefill(
    weights: &ModelWeights,
    prompt_tokens: &[u32],
    image_embeddings: &[Vec<f64>],
    steered_layers: &[usize],
) -> Result<Prefill> {
    if image_embeddings.is_empty() {
        return Err(Error::NoImageTokens);
    }
    let total = image_embeddings.len() + prompt_tokens.len();
    if total > weights.config.max_seq {
        return Err(Error::SequenceOverflow {
            requested: total,
            max: weights.config.max_seq,
        });
    }
    let mut cache = KvCache::new(&weights.config);
    let mut last = None;
    for img in image_embeddings {
        last = Some(decode_step(weights, &mut cache, img, &mut NoHook)?);
    }
    for &tok in prompt_tokens {
        let emb = token_embedding(weights, tok)?;
        last = Some(decode_step(weights, &mut cache, emb, &mut NoHook)?);
    }
    let image_positions: Vec<usize> = (0..image_embeddings.len()).collect();
    let context = PrefillContext::build(&weights.layers, &cache, &image_positions, steered_layers)?;
    let StepOutput { logits, hidden } = last.expect("at least one image embedding");
    Ok(Prefill {
        cache,
        context,
        last_hidden: hidden,
        last_logits: logits,
    })
}

/// Row of the embedding table for `token`.
///
/// # Errors
///
/// [`Error::IndexOutOfRange`] for tokens outside the vocabulary.
pub fn token_embedding(weights: &ModelWeights, token: u32) -> Result<&[f64]> {
    let t = token as usize;
    if t >= weights.config.vocab_size {
        return Err(Error::IndexOutOfRange {
            index: t,
            len: weights.config.vocab_size,
        });
    }
    Ok(weights.embeddings.row(t))
}
