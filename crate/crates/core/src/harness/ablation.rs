// SPDX-License-Identifier: MIT OR Apache-2.0

//! One-at-a-time hyperparameter sweeps around a base steering config.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::experiment::{run_experiment, ExperimentConfig, Summary};
use crate::harness::task::SyntheticTask;
use crate::model::ModelWeights;
use crate::steering::{SteeringConfig, SteeringMode};

/// τ used for the "gate never fires" control row.
pub const GATE_CLOSED_TAU: f64 = -1e9;

/// Grid values for each sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationGrids {
    pub alpha: Vec<f64>,
    /// Absolute τ values; empty means "derive from calibration quantiles".
    pub tau: Vec<f64>,
    /// Lowest steered layer; the highest stays at the base config's top layer.
    pub lower_layer: Vec<usize>,
    pub modes: Vec<SteeringMode>,
}

impl Default for AblationGrids {
    fn default() -> Self {
        Self {
            alpha: vec![0.3, 0.5, 1.0, 1.25, 1.5],
            tau: Vec::new(),
            lower_layer: vec![1, 2, 3, 4],
            modes: SteeringMode::ALL.to_vec(),
        }
    }
}

/// One grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub parameter: String,
    pub value: String,
    pub summary: Summary,
    /// Emitted tokens per prompt, for token-level comparisons between rows.
    #[serde(skip)]
    pub tokens: Vec<Vec<u32>>,
}

/// Rows of one sweep, in grid order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub name: String,
    pub rows: Vec<AblationRow>,
}

fn row(
    task: &SyntheticTask,
    weights: &ModelWeights,
    experiment: &ExperimentConfig,
    parameter: &str,
    value: String,
    steering: &SteeringConfig,
) -> Result<AblationRow> {
    let e = run_experiment(task, weights, steering, experiment)?;
    Ok(AblationRow {
        parameter: parameter.to_string(),
        value,
        summary: e.summary,
        tokens: e.runs.into_iter().map(|r| r.tokens).collect(),
    })
}

/// Sweep α, τ, the lowest steered layer and the steering mode, one at a
/// time, holding the rest at `base`.
///
/// The mode table ends with a regulated row at τ = −10⁹ as a gate-closed
/// control. Tables come back in the order alpha, tau, lower_layer, mode.
///
/// # Errors
///
/// [`Error::Config`] for an empty grid or a lower layer above the base
/// config's top layer; otherwise any run error.
pub fn ablation_suite(
    task: &SyntheticTask,
    weights: &ModelWeights,
    base: &SteeringConfig,
    experiment: &ExperimentConfig,
    grids: &AblationGrids,
    tau_grid: &[f64],
) -> Result<Vec<AblationTable>> {
    let taus = if grids.tau.is_empty() { tau_grid } else { &grids.tau };
    if grids.alpha.is_empty() || taus.is_empty() || grids.lower_layer.is_empty() || grids.modes.is_empty() {
        return Err(Error::Config("ablation grids must be non-empty".into()));
    }
    let top = *base
        .steered_layers
        .last()
        .ok_or_else(|| Error::Config("base config steers no layer".into()))?;
    if let Some(&l) = grids.lower_layer.iter().find(|&&l| l > top) {
        return Err(Error::Config(format!("lower layer {l} above top steered layer {top}")));
    }
    let regulated = base.with_mode(SteeringMode::Regulated);

    let mut alpha = Vec::new();
    for &a in &grids.alpha {
        let cfg = SteeringConfig { alpha: a, ..regulated.clone() };
        alpha.push(row(task, weights, experiment, "alpha", a.to_string(), &cfg)?);
    }
    let mut tau = Vec::new();
    for &t in taus {
        let cfg = SteeringConfig { tau: t, ..regulated.clone() };
        tau.push(row(task, weights, experiment, "tau", format!("{t:.6}"), &cfg)?);
    }
    let mut lower = Vec::new();
    for &l in &grids.lower_layer {
        let cfg = SteeringConfig {
            steered_layers: (l..=top).collect(),
            ..regulated.clone()
        };
        lower.push(row(task, weights, experiment, "lower_layer", l.to_string(), &cfg)?);
    }
    let mut modes = Vec::new();
    for &m in &grids.modes {
        modes.push(row(task, weights, experiment, "mode", m.to_string(), &base.with_mode(m))?);
    }
    let closed = SteeringConfig {
        tau: GATE_CLOSED_TAU,
        ..regulated
    };
    modes.push(row(task, weights, experiment, "mode", "regulated_gate_closed".into(), &closed)?);

    Ok(vec![
        AblationTable { name: "alpha".into(), rows: alpha },
        AblationTable { name: "tau".into(), rows: tau },
        AblationTable { name: "lower_layer".into(), rows: lower },
        AblationTable { name: "mode".into(), rows: modes },
    ])
}
