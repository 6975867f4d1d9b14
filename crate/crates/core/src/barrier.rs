// SPDX-License-Identifier: MIT OR Apache-2.0

//! Visual-grounding barrier.
//!
//! For a steered layer, the barrier of an attention input `x` is the mean
//! pre-softmax score from the current queries to the cached image keys:
//!
//! ```text
//! h(x) = 1 / (H · |I|) · Σ_m Σ_{j∈I} ⟨W_Q^m x, k_m(j)⟩ / √d_head
//! ```
//!
//! The keys are fixed once the prompt is encoded, so `h` is linear in `x`
//! with the constant gradient
//!
//! ```text
//! g = 1 / (H · |I| · √d_head) · Σ_m (W_Q^m)ᵀ S_m,    S_m = Σ_{j∈I} k_m(j).
//! ```
//!
//! After prefill `g` is stored per layer and each decode step costs one
//! length-`d` dot product. [`barrier_direct`] evaluates the double sum
//! literally and is kept as the reference for tests.

use crate::error::{Error, Result};
use crate::model::{KvCache, LayerWeights};
use crate::numeric::{dot, dot_unchecked, matvec, matvec_transposed};

/// Gradient of the barrier with respect to the attention input of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BarrierGradient {
    pub g: Vec<f64>,
    /// Cached `‖g‖²`.
    pub norm_sq: f64,
    /// Constant term of `h = gᵀx + offset`. Always zero for bias-free projections.
    pub offset: f64,
}

impl BarrierGradient {
    #[must_use]
    pub fn new(g: Vec<f64>) -> Self {
        let norm_sq = dot_unchecked(&g, &g);
        Self {
            g,
            norm_sq,
            offset: 0.0,
        }
    }

    #[must_use]
    pub fn dim(&self) -> usize {
        self.g.len()
    }
}

/// Per-head sums of the cached image keys of `layer`.
///
/// Summation runs over `image_positions` in the given order.
///
/// # Errors
///
/// [`Error::IndexOutOfRange`] if a position or the layer is not in the cache.
pub fn aggregate_image_keys(
    cache: &KvCache,
    image_positions: &[usize],
    layer: usize,
) -> Result<Vec<Vec<f64>>> {
    if layer >= cache.n_layers() {
        return Err(Error::IndexOutOfRange {
            index: layer,
            len: cache.n_layers(),
        });
    }
    let len = cache.layer_len(layer);
    if let Some(&bad) = image_positions.iter().find(|&&j| j >= len) {
        return Err(Error::IndexOutOfRange { index: bad, len });
    }
    let heads = cache.n_heads();
    let d_head = cache.d_head();
    let mut sums = vec![vec![0.0; d_head]; heads];
    for (m, sum) in sums.iter_mut().enumerate() {
        for &j in image_positions {
            for (s, k) in sum.iter_mut().zip(cache.key(layer, m, j)) {
                *s += k;
            }
        }
    }
    Ok(sums)
}

/// Closed-form gradient from the query projections and image-key sums.
///
/// # Errors
///
/// [`Error::NoImageTokens`] when `n_image == 0`, [`Error::Shape`] if the sums
/// do not match the layer's heads.
pub fn barrier_gradient(
    layer: &LayerWeights,
    key_sums: &[Vec<f64>],
    n_image: usize,
) -> Result<BarrierGradient> {
    if n_image == 0 {
        return Err(Error::NoImageTokens);
    }
    if key_sums.len() != layer.w_q.len() {
        return Err(Error::Shape {
            op: "barrier_gradient",
            expected: layer.w_q.len(),
            got: key_sums.len(),
        });
    }
    let d = layer.w_q[0].cols();
    let d_head = layer.w_q[0].rows();
    let mut g = vec![0.0; d];
    for (w_q, s) in layer.w_q.iter().zip(key_sums) {
        let part = matvec_transposed(w_q, s)?;
        for (gi, p) in g.iter_mut().zip(&part) {
            *gi += p;
        }
    }
    let scale = 1.0 / (key_sums.len() as f64 * n_image as f64 * (d_head as f64).sqrt());
    for gi in &mut g {
        *gi *= scale;
    }
    Ok(BarrierGradient::new(g))
}

/// Gradient of the barrier with respect to the concatenated head queries:
/// head `m` contributes `S_m / (H · |I| · √d_head)`.
///
/// # Errors
///
/// [`Error::NoImageTokens`] when `n_image == 0`, [`Error::Empty`] without heads.
pub fn query_space_gradient(key_sums: &[Vec<f64>], n_image: usize) -> Result<Vec<f64>> {
    if n_image == 0 {
        return Err(Error::NoImageTokens);
    }
    let d_head = key_sums.first().ok_or(Error::Empty("query_space_gradient"))?.len();
    let scale = 1.0 / (key_sums.len() as f64 * n_image as f64 * (d_head as f64).sqrt());
    Ok(key_sums.iter().flatten().map(|s| s * scale).collect())
}

/// `h = gᵀx + offset`.
///
/// # Errors
///
/// [`Error::Shape`] when `x` and `g` differ in length.
pub fn barrier_value(gradient: &BarrierGradient, x: &[f64]) -> Result<f64> {
    Ok(dot(&gradient.g, x)? + gradient.offset)
}

/// The barrier evaluated literally: project `x` through every head's `W_Q`
/// and average the scaled scores against each cached image key.
///
/// # Errors
///
/// [`Error::NoImageTokens`], [`Error::IndexOutOfRange`] or [`Error::Shape`].
pub fn barrier_direct(
    x: &[f64],
    layer_weights: &LayerWeights,
    cache: &KvCache,
    layer: usize,
    image_positions: &[usize],
) -> Result<f64> {
    if image_positions.is_empty() {
        return Err(Error::NoImageTokens);
    }
    if layer >= cache.n_layers() {
        return Err(Error::IndexOutOfRange {
            index: layer,
            len: cache.n_layers(),
        });
    }
    let len = cache.layer_len(layer);
    if let Some(&bad) = image_positions.iter().find(|&&j| j >= len) {
        return Err(Error::IndexOutOfRange { index: bad, len });
    }
    let heads = layer_weights.w_q.len();
    let d_head = layer_weights.w_q[0].rows();
    let scale = 1.0 / (d_head as f64).sqrt();
    let mut total = 0.0;
    for (m, w_q) in layer_weights.w_q.iter().enumerate() {
        let q = matvec(w_q, x)?;
        for &j in image_positions {
            total += dot(&q, cache.key(layer, m, j))? * scale;
        }
    }
    Ok(total / (heads as f64 * image_positions.len() as f64))
}

/// Barrier from already-projected queries: `Σ_m ⟨G_m, q_m⟩` with the
/// query-space gradient `G` of [`query_space_gradient`].
///
/// # Errors
///
/// [`Error::Shape`] on length mismatch.
pub fn barrier_from_queries(query_gradient: &[f64], queries: &[f64]) -> Result<f64> {
    dot(query_gradient, queries)
}
