// SPDX-License-Identifier: MIT OR Apache-2.0

//! Append-only KV cache and the per-prompt constants derived from it at prefill.

use crate::barrier::{self, BarrierGradient};
use crate::error::{Error, Result};
use crate::model::{LayerWeights, ModelConfig};

/// Keys and values for every (layer, head, position).
///
/// Storage per layer is `[position][head][d_head]`, so appending a step is a
/// single `extend` per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    n_heads: usize,
    d_head: usize,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
}

impl KvCache {
    #[must_use]
    pub fn new(config: &ModelConfig) -> Self {
        Self {
            n_heads: config.n_heads,
            d_head: config.d_head,
            keys: vec![Vec::new(); config.n_layers],
            values: vec![Vec::new(); config.n_layers],
            len: 0,
        }
    }

    /// Number of committed positions, shared by every layer and head.
    #[must_use]
    pub fn len(&self) -> usize {
        self.len
    }

    #[must_use]
    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[must_use]
    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    #[must_use]
    pub fn d_head(&self) -> usize {
        self.d_head
    }

    #[must_use]
    pub fn n_layers(&self) -> usize {
        self.keys.len()
    }

    /// Positions stored for `layer`, including a step still in progress.
    pub(crate) fn layer_len(&self, layer: usize) -> usize {
        self.keys[layer].len() / (self.n_heads * self.d_head)
    }

    /// Key of `head` at `pos` in `layer`.
    #[must_use]
    pub fn key(&self, layer: usize, head: usize, pos: usize) -> &[f64] {
        let off = (pos * self.n_heads + head) * self.d_head;
        &self.keys[layer][off..off + self.d_head]
    }

    #[must_use]
    pub fn value(&self, layer: usize, head: usize, pos: usize) -> &[f64] {
        let off = (pos * self.n_heads + head) * self.d_head;
        &self.values[layer][off..off + self.d_head]
    }

    /// Write one position's concatenated head keys and values for `layer`.
    pub(crate) fn push(&mut self, layer: usize, keys: &[f64], values: &[f64]) {
        debug_assert_eq!(keys.len(), self.n_heads * self.d_head);
        debug_assert_eq!(self.layer_len(layer), self.len);
        self.keys[layer].extend_from_slice(keys);
        self.values[layer].extend_from_slice(values);
    }

    /// Mark the in-progress position as committed on every layer.
    pub(crate) fn commit(&mut self) {
        self.len += 1;
        debug_assert!((0..self.n_layers()).all(|l| self.layer_len(l) == self.len));
    }
}

/// Per steered layer: cached image-key sums and the constant barrier gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct SteeredLayer {
    pub layer: usize,
    /// `Σ_{j ∈ image} k_m(j)` for each head `m`.
    pub key_sums: Vec<Vec<f64>>,
    /// Gradient of the barrier with respect to the attention input.
    pub gradient: BarrierGradient,
    /// Gradient of the barrier with respect to the concatenated head queries.
    pub query_gradient: Vec<f64>,
    pub query_gradient_norm_sq: f64,
}

/// Prompt-constant quantities computed once after prefill.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefillContext {
    pub image_positions: Vec<usize>,
    pub layers: Vec<SteeredLayer>,
    lookup: Vec<Option<usize>>,
}

impl PrefillContext {
    /// Aggregate image keys and derive gradients for each layer in `steered`.
    ///
    /// # Errors
    ///
    /// [`Error::NoImageTokens`], [`Error::IndexOutOfRange`] for bad positions or layers.
    pub fn build(
        layers: &[LayerWeights],
        cache: &KvCache,
        image_positions: &[usize],
        steered: &[usize],
    ) -> Result<Self> {
        if image_positions.is_empty() {
            return Err(Error::NoImageTokens);
        }
        let mut lookup = vec![None; layers.len()];
        let mut out = Vec::with_capacity(steered.len());
        for &layer in steered {
            if layer >= layers.len() {
                return Err(Error::IndexOutOfRange {
                    index: layer,
                    len: layers.len(),
                });
            }
            if lookup[layer].is_some() {
                continue;
            }
            let key_sums = barrier::aggregate_image_keys(cache, image_positions, layer)?;
            let gradient =
                barrier::barrier_gradient(&layers[layer], &key_sums, image_positions.len())?;
            let query_gradient = barrier::query_space_gradient(&key_sums, image_positions.len())?;
            let query_gradient_norm_sq = query_gradient.iter().map(|v| v * v).sum();
            lookup[layer] = Some(out.len());
            out.push(SteeredLayer {
                layer,
                key_sums,
                gradient,
                query_gradient,
                query_gradient_norm_sq,
            });
        }
        Ok(Self {
            image_positions: image_positions.to_vec(),
            layers: out,
            lookup,
        })
    }

    /// Steering constants for `layer`, if it is steered.
    #[must_use]
    pub fn layer(&self, layer: usize) -> Option<&SteeredLayer> {
        self.lookup
            .get(layer)
            .copied()
            .flatten()
            .map(|i| &self.layers[i])
    }

    #[must_use]
    pub fn n_image(&self) -> usize {
        self.image_positions.len()
    }
}
