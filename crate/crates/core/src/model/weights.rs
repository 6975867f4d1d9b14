// SPDX-License-Identifier: MIT OR Apache-2.0

//! Decoder parameters and their JSON document form.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numeric::{Matrix, Rng};

/// Parameters of one pre-norm decoder block.
///
/// Q/K/V projections carry no bias, so the pre-softmax score of a query
/// against a fixed key is linear in the projection input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerWeights {
    /// Per head, `d_head × d_model`.
    pub w_q: Vec<Matrix>,
    pub w_k: Vec<Matrix>,
    pub w_v: Vec<Matrix>,
    /// `d_model × (n_heads · d_head)`.
    pub w_o: Matrix,
    /// `d_ff × d_model`.
    pub ffn_in: Matrix,
    /// `d_model × d_ff`.
    pub ffn_out: Matrix,
    pub attn_norm: Vec<f64>,
    pub ffn_norm: Vec<f64>,
}

impl LayerWeights {
    fn random(cfg: &ModelConfig, scale: f64, rng: &mut Rng) -> Self {
        let head = |rng: &mut Rng| -> Vec<Matrix> {
            (0..cfg.n_heads)
                .map(|_| Matrix::gaussian(cfg.d_head, cfg.d_model, scale, rng))
                .collect()
        };
        let w_q = head(rng);
        let w_k = head(rng);
        let w_v = head(rng);
        Self {
            w_q,
            w_k,
            w_v,
            w_o: Matrix::gaussian(cfg.d_model, cfg.attn_width(), scale, rng),
            ffn_in: Matrix::gaussian(cfg.d_ff, cfg.d_model, scale, rng),
            ffn_out: Matrix::gaussian(cfg.d_model, cfg.d_ff, scale, rng),
            attn_norm: vec![1.0; cfg.d_model],
            ffn_norm: vec![1.0; cfg.d_model],
        }
    }

    fn check(&self, cfg: &ModelConfig, layer: usize) -> Result<()> {
        let bad = |what: &str| Error::Config(format!("layer {layer}: {what} has the wrong shape"));
        for (name, mats) in [("w_q", &self.w_q), ("w_k", &self.w_k), ("w_v", &self.w_v)] {
            if mats.len() != cfg.n_heads
                || mats
                    .iter()
                    .any(|m| m.rows() != cfg.d_head || m.cols() != cfg.d_model)
            {
                return Err(bad(name));
            }
        }
        if self.w_o.rows() != cfg.d_model || self.w_o.cols() != cfg.attn_width() {
            return Err(bad("w_o"));
        }
        if self.ffn_in.rows() != cfg.d_ff || self.ffn_in.cols() != cfg.d_model {
            return Err(bad("ffn_in"));
        }
        if self.ffn_out.rows() != cfg.d_model || self.ffn_out.cols() != cfg.d_ff {
            return Err(bad("ffn_out"));
        }
        if self.attn_norm.len() != cfg.d_model || self.ffn_norm.len() != cfg.d_model {
            return Err(bad("norm gain"));
        }
        let finite = self
            .w_q
            .iter()
            .chain(&self.w_k)
            .chain(&self.w_v)
            .chain([&self.w_o, &self.ffn_in, &self.ffn_out])
            .all(Matrix::is_finite)
            && self.attn_norm.iter().chain(&self.ffn_norm).all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite(format!("layer {layer} weights")));
        }
        Ok(())
    }
}

/// Full decoder: token and position tables, blocks and output head.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    /// `vocab_size × d_model`. Image tokens bypass this table.
    pub embeddings: Matrix,
    /// `max_seq × d_model`, added to every input at its position.
    pub positions: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f64>,
    /// `vocab_size × d_model`.
    pub lm_head: Matrix,
    pub logit_bias: Vec<f64>,
}

/// Deterministic random weights: every matrix entry is `N(0, 1/d_model)`.
///
/// # Errors
///
/// [`Error::Config`] if `config` is invalid.
pub fn init_model(config: &ModelConfig) -> Result<ModelWeights> {
    config.validate()?;
    let mut rng = Rng::new(config.seed);
    let scale = 1.0 / (config.d_model as f64).sqrt();
    let embeddings = Matrix::gaussian(config.vocab_size, config.d_model, scale, &mut rng);
    let positions = Matrix::gaussian(config.max_seq, config.d_model, scale, &mut rng);
    let layers = (0..config.n_layers)
        .map(|_| LayerWeights::random(config, scale, &mut rng))
        .collect();
    let lm_head = Matrix::gaussian(config.vocab_size, config.d_model, scale, &mut rng);
    Ok(ModelWeights {
        config: config.clone(),
        embeddings,
        positions,
        layers,
        final_norm: vec![1.0; config.d_model],
        lm_head,
        logit_bias: vec![0.0; config.vocab_size],
    })
}

impl ModelWeights {
    /// Validate every shape against `config` and require finite entries.
    ///
    /// # Errors
    ///
    /// [`Error::Config`] for shape problems, [`Error::NonFinite`] for NaN/Inf.
    pub fn validate(&self) -> Result<()> {
        let cfg = &self.config;
        cfg.validate()?;
        if self.layers.len() != cfg.n_layers {
            return Err(Error::Config(format!(
                "expected {} layers, found {}",
                cfg.n_layers,
                self.layers.len()
            )));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            layer.check(cfg, i)?;
        }
        let table_ok = |m: &Matrix, rows: usize| m.rows() == rows && m.cols() == cfg.d_model;
        if !table_ok(&self.embeddings, cfg.vocab_size) {
            return Err(Error::Config("embeddings have the wrong shape".into()));
        }
        if !table_ok(&self.positions, cfg.max_seq) {
            return Err(Error::Config("position table has the wrong shape".into()));
        }
        if !table_ok(&self.lm_head, cfg.vocab_size) {
            return Err(Error::Config("lm_head has the wrong shape".into()));
        }
        if self.final_norm.len() != cfg.d_model || self.logit_bias.len() != cfg.vocab_size {
            return Err(Error::Config("final norm or logit bias has the wrong length".into()));
        }
        let finite = [&self.embeddings, &self.positions, &self.lm_head]
            .into_iter()
            .all(Matrix::is_finite)
            && self
                .final_norm
                .iter()
                .chain(&self.logit_bias)
                .all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite("model tables".into()));
        }
        Ok(())
    }

    /// Add the positional row for `position` to `x` in place.
    ///
    /// # Errors
    ///
    /// [`Error::SequenceOverflow`] past `max_seq`.
    pub fn add_position(&self, x: &mut [f64], position: usize) -> Result<()> {
        if position >= self.config.max_seq {
            return Err(Error::SequenceOverflow {
                requested: position + 1,
                max: self.config.max_seq,
            });
        }
        for (xi, p) in x.iter_mut().zip(self.positions.row(position)) {
            *xi += p;
        }
        Ok(())
    }

    /// Serialize as one pretty-printed JSON document.
    ///
    /// # Errors
    ///
    /// [`Error::Json`] if serialization fails.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ModelDocument::from(self.clone()))?)
    }

    /// Parse and validate a JSON document written by [`ModelWeights::to_json`].
    ///
    /// # Errors
    ///
    /// [`Error::Json`] for malformed input, plus anything [`ModelWeights::validate`] reports.
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ModelDocument = serde_json::from_str(text)?;
        let weights = Self::from(doc);
        weights.validate()?;
        Ok(weights)
    }

    /// # Errors
    ///
    /// [`Error::Io`] on write failure.
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    /// # Errors
    ///
    /// [`Error::Io`] on read failure, otherwise as [`ModelWeights::from_json`].
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// On-disk layout: `{config, weights, embeddings}`.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDocument {
    config: ModelConfig,
    weights: WeightsBody,
    embeddings: Matrix,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightsBody {
    positions: Matrix,
    layers: Vec<LayerWeights>,
    final_norm: Vec<f64>,
    lm_head: Matrix,
    logit_bias: Vec<f64>,
}

impl From<ModelWeights> for ModelDocument {
    fn from(w: ModelWeights) -> Self {
        Self {
            config: w.config,
            weights: WeightsBody {
                positions: w.positions,
                layers: w.layers,
                final_norm: w.final_norm,
                lm_head: w.lm_head,
                logit_bias: w.logit_bias,
            },
            embeddings: w.embeddings,
        }
    }
}

impl From<ModelDocument> for ModelWeights {
    fn from(d: ModelDocument) -> Self {
        Self {
            config: d.config,
            embeddings: d.embeddings,
            positions: d.weights.positions,
            layers: d.weights.layers,
            final_norm: d.weights.final_norm,
            lm_head: d.weights.lm_head,
            logit_bias: d.weights.logit_bias,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic() {
        let cfg = ModelConfig::default();
        assert_eq!(init_model(&cfg).unwrap(), init_model(&cfg).unwrap());
        let other = ModelConfig { seed: 1, ..cfg.clone() };
        assert_ne!(init_model(&cfg).unwrap(), init_model(&other).unwrap());
    }

    #[test]
    fn head_projection_shapes() {
        let w = init_model(&ModelConfig::default()).unwrap();
        let q = &w.layers[0].w_q[0];
        assert_eq!((q.rows(), q.cols()), (16, 64));
        assert_eq!(w.layers[0].w_q.len(), 4);
        w.validate().unwrap();
    }

    #[test]
    fn entry_variance_is_one_over_d() {
        let w = init_model(&ModelConfig::default()).unwrap();
        let entries: Vec<f64> = w
            .layers
            .iter()
            .flat_map(|l| l.w_q.iter().chain(&l.w_k))
            .flat_map(|m| m.as_slice().iter().copied())
            .take(10_000)
            .collect();
        assert_eq!(entries.len(), 10_000);
        let n = entries.len() as f64;
        let mean = entries.iter().sum::<f64>() / n;
        let var = entries.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let target = 1.0 / 64.0;
        assert!((var - target).abs() <= 0.2 * target, "var {var}");
    }

    #[test]
    fn json_document_round_trips_bit_exact() {
        let cfg = ModelConfig {
            n_layers: 2,
            ..ModelConfig::default()
        };
        let w = init_model(&cfg).unwrap();
        let text = w.to_json().unwrap();
        let value: serde_json::Value = serde_json::from_str(&text).unwrap();
        let keys: Vec<_> = value.as_object().unwrap().keys().cloned().collect();
        assert_eq!(keys.len(), 3);
        for k in ["config", "weights", "embeddings"] {
            assert!(value.get(k).is_some(), "missing {k}");
        }
        assert_eq!(ModelWeights::from_json(&text).unwrap(), w);
    }

    #[test]
    fn json_rejects_bad_shapes() {
        let cfg = ModelConfig {
            n_layers: 1,
            ..ModelConfig::default()
        };
        let mut w = init_model(&cfg).unwrap();
        w.logit_bias.pop();
        let text = w.to_json().unwrap();
        assert!(matches!(ModelWeights::from_json(&text), Err(Error::Config(_))));
    }
}
