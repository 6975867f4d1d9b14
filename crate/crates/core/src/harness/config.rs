// SPDX-License-Identifier: MIT OR Apache-2.0

//! The run-config document: `{model, task, steering, experiment}`.
//!
//! Every field has a default, so `{}` is a valid config. Unknown fields are
//! rejected at every level.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::experiment::{calibrate_tau, ExperimentConfig};
use crate::harness::task::{build_synthetic_task, SyntheticTask, TaskConfig};
use crate::model::{ModelConfig, ModelWeights};
use crate::steering::SteeringConfig;

/// How the steering threshold is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum TauChoice {
    /// Calibrate on held-out prompts (see [`ExperimentConfig`]).
    #[default]
    Calibrated,
    /// Use `steering.tau` as given.
    Fixed,
}

/// Complete description of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub task: TaskConfig,
    pub steering: SteeringConfig,
    pub experiment: ExperimentConfig,
    pub tau: TauChoice,
}

impl Default for RunConfig {
    fn default() -> Self {
        let task = TaskConfig::default();
        Self {
            model: task.model_config(),
            task,
            steering: SteeringConfig::default(),
            experiment: ExperimentConfig::default(),
            tau: TauChoice::Calibrated,
        }
    }
}

/// Task, weights and a steering config with τ resolved.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub task: SyntheticTask,
    pub weights: ModelWeights,
    pub steering: SteeringConfig,
}

impl RunConfig {
    /// # Errors
    ///
    /// [`Error::Json`] for malformed JSON or unknown fields, then any
    /// [`RunConfig::validate`] error.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// # Errors
    ///
    /// [`Error::Io`] when the file cannot be read, otherwise as [`RunConfig::from_json`].
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// # Errors
    ///
    /// [`Error::Json`] if serialization fails.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Cross-section consistency checks.
    ///
    /// # Errors
    ///
    /// [`Error::Config`] naming the first problem.
    pub fn validate(&self) -> Result<()> {
        self.task.validate(&self.model)?;
        self.steering.validate(self.model.n_layers)?;
        self.experiment.validate()?;
        let needed = self.task.prompt_len() + self.experiment.max_new;
        if needed > self.model.max_seq {
            return Err(Error::Config(format!(
                "prompt plus max_new needs {needed} positions, max_seq is {}",
                self.model.max_seq
            )));
        }
        Ok(())
    }

    /// Build the task and resolve τ.
    ///
    /// # Errors
    ///
    /// Config errors from the task builder, generation errors from calibration.
    pub fn prepare(&self) -> Result<Prepared> {
        self.validate()?;
        let (task, weights) = build_synthetic_task(&self.model, &self.task)?;
        let mut steering = self.steering.clone();
        if self.tau == TauChoice::Calibrated {
            steering.tau = calibrate_tau(&task, &weights, &steering, &self.experiment)?;
        }
        Ok(Prepared {
            task,
            weights,
            steering,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_default() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn round_trip() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_json(&cfg.to_json().unwrap()).unwrap(), cfg);
    }

    #[test]
    fn unknown_fields_rejected() {
        for doc in [
            r#"{"steering": {"taus": -3}}"#,
            r#"{"model": {"layers": 3}}"#,
            r#"{"extra": 1}"#,
            r#"{"experiment": {"n_prompt": 3}}"#,
        ] {
            let err = RunConfig::from_json(doc).unwrap_err();
            assert_eq!(err.exit_code(), 1, "{doc}");
        }
    }

    #[test]
    fn inconsistent_vocab_rejected() {
        let doc = r#"{"model": {"vocab_size": 10}}"#;
        assert!(matches!(RunConfig::from_json(doc), Err(Error::Config(_))));
    }
}
