// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dimensions of the toy decoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    /// Per-head width; must equal `d_model / n_heads`.
    pub d_head: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub seed: u64,
    /// Token that terminates generation when emitted.
    pub eos_token: Option<u32>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 6,
            n_heads: 4,
            d_model: 64,
            d_head: 16,
            d_ff: 128,
            vocab_size: 35,
            max_seq: 192,
            seed: 0,
            eos_token: Some(0),
        }
    }
}

impl ModelConfig {
    /// Check every structural constraint.
    ///
    /// # Errors
    ///
    /// [`Error::Config`] naming the first violated constraint.
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(Error::Config("n_layers must be at least 1".into()));
        }
        if self.n_heads == 0 {
            return Err(Error::Config("n_heads must be at least 1".into()));
        }
        if self.d_head == 0 || self.d_model != self.n_heads * self.d_head {
            return Err(Error::Config(format!(
                "d_model ({}) must equal n_heads ({}) * d_head ({})",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        if self.d_ff == 0 {
            return Err(Error::Config("d_ff must be positive".into()));
        }
        if self.vocab_size == 0 {
            return Err(Error::Config("vocab_size must be positive".into()));
        }
        if self.max_seq < 2 {
            return Err(Error::Config("max_seq must be at least 2".into()));
        }
        if let Some(eos) = self.eos_token {
            if eos as usize >= self.vocab_size {
                return Err(Error::Config(format!(
                    "eos_token {eos} outside vocabulary of size {}",
                    self.vocab_size
                )));
            }
        }
        Ok(())
    }

    /// Width of the concatenated head outputs.
    #[must_use]
    pub fn attn_width(&self) -> usize {
        self.n_heads * self.d_head
    }
}
