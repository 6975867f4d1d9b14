// SPDX-License-Identifier: MIT OR Apache-2.0

//! Minimum-norm barrier correction and the decode-time steering controller.
//!
//! With `h(x) = gᵀx` exact, the smallest `θ` with `h(x + θ) ≥ τ` solves
//!
//! ```text
//! min ½‖θ‖²   s.t.   gᵀθ ≥ τ − h
//! ```
//!
//! whose KKT point is `θ* = (τ − h)₊ / (‖g‖² + ε) · g`. The multiplier is
//! `λ = (τ − h)₊ / (‖g‖² + ε)` and `θ* = λ g`. Steering then replaces the
//! attention input with `x + α θ*`.
//!
//! [`qp_oracle`] and [`qp_oracle_iterative`] solve the same program without
//! the closed form and exist to check it.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::barrier::BarrierGradient;
use crate::error::{Error, Result};
use crate::model::{PrefillContext, SteeredLayer, StepHook};
use crate::numeric::{axpy, dot, dot_unchecked, norm};

/// Which correction the controller applies at steered layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SteeringMode {
    /// Observe only: the barrier is recorded, nothing is changed.
    Off,
    /// Correct the attention input only when `h < τ`.
    #[default]
    Regulated,
    /// Apply `(τ − h)/(‖g‖² + ε) · g` at every step, whatever its sign.
    Continuous,
    /// Correct the projected queries only; cached keys and values stay unsteered.
    QOnly,
}

impl SteeringMode {
    pub const ALL: [Self; 4] = [Self::Off, Self::Regulated, Self::Continuous, Self::QOnly];

    #[must_use]
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Off => "off",
            Self::Regulated => "regulated",
            Self::Continuous => "continuous",
            Self::QOnly => "q_only",
        }
    }
}

impl std::fmt::Display for SteeringMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for SteeringMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown steering mode {s:?}")))
    }
}

/// Threshold, strength, floor, layer set and mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SteeringConfig {
    pub tau: f64,
    pub alpha: f64,
    pub epsilon: f64,
    pub steered_layers: Vec<usize>,
    pub mode: SteeringMode,
}

impl Default for SteeringConfig {
    fn default() -> Self {
        Self {
            tau: -5.0,
            alpha: 1.0,
            epsilon: 1e-6,
            steered_layers: vec![2, 3, 4],
            mode: SteeringMode::Regulated,
        }
    }
}

impl SteeringConfig {
    /// Check the constraints against a model with `n_layers` blocks.
    ///
    /// `epsilon = 0` is accepted so exactness checks can run the undamped
    /// solution; it must not be negative.
    ///
    /// # Errors
    ///
    /// [`Error::Config`] naming the violated constraint.
    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if !self.tau.is_finite() {
            return Err(Error::Config("tau must be finite".into()));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config("epsilon must be finite and non-negative".into()));
        }
        if self.mode != SteeringMode::Off && !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config("alpha must be positive when steering".into()));
        }
        if let Some(&l) = self.steered_layers.iter().find(|&&l| l >= n_layers) {
            return Err(Error::Config(format!(
                "steered layer {l} outside model with {n_layers} layers"
            )));
        }
        let mut sorted = self.steered_layers.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted != self.steered_layers {
            return Err(Error::Config(
                "steered_layers must be strictly increasing".into(),
            ));
        }
        Ok(())
    }

    /// Same settings with a different mode.
    #[must_use]
    pub fn with_mode(&self, mode: SteeringMode) -> Self {
        Self {
            mode,
            ..self.clone()
        }
    }
}

/// Output of the single-constraint solve.
#[derive(Debug, Clone, PartialEq)]
pub struct Correction {
    pub theta: Vec<f64>,
    /// `(τ − h)₊`.
    pub violation: f64,
    pub fired: bool,
    /// KKT multiplier; `theta == lambda · g`.
    pub lambda: f64,
}

impl Correction {
    #[must_use]
    pub fn norm(&self) -> f64 {
        norm(&self.theta)
    }
}

fn scaled(g: &[f64], lambda: f64) -> Vec<f64> {
    g.iter().map(|v| lambda * v).collect()
}

/// Gated closed-form minimum-norm correction.
///
/// A zero denominator (`g = 0` with `ε = 0`) yields `λ = 0`.
#[must_use]
pub fn solve_correction(h: f64, g: &BarrierGradient, tau: f64, epsilon: f64) -> Correction {
    let violation = (tau - h).max(0.0);
    let fired = violation > 0.0;
    if !fired {
        return Correction {
            theta: vec![0.0; g.dim()],
            violation,
            fired,
            lambda: 0.0,
        };
    }
    let denom = g.norm_sq + epsilon;
    let lambda = if denom > 0.0 { violation / denom } else { 0.0 };
    Correction {
        theta: scaled(&g.g, lambda),
        violation,
        fired,
        lambda,
    }
}

/// Ungated correction `(τ − h)/(‖g‖² + ε) · g`, applied on every step.
///
/// `violation` still reports `(τ − h)₊`; `lambda` is signed.
#[must_use]
pub fn continuous_correction(h: f64, g: &BarrierGradient, tau: f64, epsilon: f64) -> Correction {
    let denom = g.norm_sq + epsilon;
    let lambda = if denom > 0.0 { (tau - h) / denom } else { 0.0 };
    Correction {
        theta: scaled(&g.g, lambda),
        violation: (tau - h).max(0.0),
        fired: true,
        lambda,
    }
}

/// Euclidean projection of the origin onto `{θ : gᵀθ ≥ τ − h}`, by reflection.
///
/// A Householder reflector `R` maps `g` onto `γ e₁`. In reflected
/// coordinates the constraint only involves the first coordinate, so the
/// nearest feasible point is `(τ − h)/γ · e₁`, mapped back through `R`.
///
/// # Errors
///
/// [`Error::Infeasible`] when `g = 0` and the origin violates the constraint.
pub fn qp_oracle(h: f64, g: &[f64], tau: f64) -> Result<Vec<f64>> {
    let need = tau - h;
    if need <= 0.0 {
        return Ok(vec![0.0; g.len()]);
    }
    let g_norm = norm(g);
    if g_norm == 0.0 {
        return Err(Error::Infeasible(need));
    }
    // v = g − γ e₁ with γ = −sign(g₀)‖g‖ avoids cancellation.
    let gamma = if g[0] >= 0.0 { -g_norm } else { g_norm };
    let mut v = g.to_vec();
    v[0] -= gamma;
    let v_sq = dot_unchecked(&v, &v);
    let y1 = need / gamma;
    // R e₁ = e₁ − 2 v v₀ / ‖v‖².
    let coef = 2.0 * v[0] / v_sq;
    let mut theta: Vec<f64> = v.iter().map(|vi| -y1 * coef * vi).collect();
    theta[0] += y1;
    Ok(theta)
}

/// The same projection by the method of multipliers: gradient descent on
/// the augmented Lagrangian in `θ`, then a clipped multiplier update.
///
/// Runs `iterations` inner gradient steps in total.
///
/// # Errors
///
/// [`Error::Infeasible`] when `g = 0` and the origin violates the constraint.
pub fn qp_oracle_iterative(h: f64, g: &[f64], tau: f64, iterations: usize) -> Result<Vec<f64>> {
    let need = tau - h;
    let g_sq = dot_unchecked(g, g);
    if need <= 0.0 {
        return Ok(vec![0.0; g.len()]);
    }
    if g_sq == 0.0 {
        return Err(Error::Infeasible(need));
    }
    const INNER: usize = 20;
    let rho = 1.0 / g_sq;
    // Hessian eigenvalues are 1 and 1 + ρ‖g‖² = 2.
    let step = 0.5;
    let mut theta = vec![0.0; g.len()];
    let mut mu = 0.0f64;
    for _ in 0..iterations.div_ceil(INNER) {
        for _ in 0..INNER {
            let pull = (mu + rho * (need - dot_unchecked(g, &theta))).max(0.0);
            for (t, gi) in theta.iter_mut().zip(g) {
                *t -= step * (*t - pull * gi);
            }
        }
        mu = (mu + rho * (need - dot_unchecked(g, &theta))).max(0.0);
    }
    Ok(theta)
}

/// `x + α θ`. Returns `x` unchanged when the correction did not fire or `α = 0`.
///
/// # Errors
///
/// [`Error::Shape`] on length mismatch.
pub fn apply_steering(x: &[f64], correction: &Correction, alpha: f64) -> Result<Vec<f64>> {
    if x.len() != correction.theta.len() {
        return Err(Error::Shape {
            op: "apply_steering",
            expected: x.len(),
            got: correction.theta.len(),
        });
    }
    let mut out = x.to_vec();
    if correction.fired && alpha != 0.0 {
        axpy(alpha, &correction.theta, &mut out);
    }
    Ok(out)
}

/// Per-head query updates that lift the barrier to `τ`, computed as the
/// minimum-norm solution in the space of concatenated queries.
///
/// `query_gradient` is `∂h/∂q` (see [`crate::barrier::query_space_gradient`]).
/// The result has one `d_head` block per head, in head order.
#[must_use]
pub fn q_only_correction(h: f64, query_gradient: &[f64], tau: f64, epsilon: f64) -> Correction {
    solve_correction(h, &BarrierGradient::new(query_gradient.to_vec()), tau, epsilon)
}

/// What the controller saw and did at one (step, steered layer).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerRecord {
    pub layer: usize,
    /// Barrier before any correction.
    pub h: f64,
    pub fired: bool,
    /// `‖θ‖` before scaling by `α`; query-space norm in q-only mode.
    pub theta_norm: f64,
    /// `(τ − h)₊`.
    pub violation: f64,
    /// Attention input after steering, kept only when capture is enabled.
    pub steered_input: Option<Vec<f64>>,
}

/// Pending per-layer query update for q-only steering.
#[derive(Debug, Clone, Copy)]
struct QueryUpdate {
    layer: usize,
    scale: f64,
}

/// Apply one steering decision to the attention input `x` of a steered layer.
///
/// Returns the trace record. In q-only mode `x` is left alone and the
/// returned scale (`α λ`) must be applied to the queries along the query
/// gradient.
pub fn steering_hook(
    config: &SteeringConfig,
    layer: &SteeredLayer,
    x: &mut [f64],
) -> (LayerRecord, Option<f64>) {
    let g = &layer.gradient;
    let h = dot_unchecked(&g.g, x) + g.offset;
    let mut record = LayerRecord {
        layer: layer.layer,
        h,
        fired: false,
        theta_norm: 0.0,
        violation: (config.tau - h).max(0.0),
        steered_input: None,
    };
    let mut query_scale = None;
    match config.mode {
        SteeringMode::Off => {}
        SteeringMode::Regulated | SteeringMode::Continuous => {
            let c = if config.mode == SteeringMode::Regulated {
                solve_correction(h, g, config.tau, config.epsilon)
            } else {
                continuous_correction(h, g, config.tau, config.epsilon)
            };
            record.fired = c.fired;
            record.theta_norm = c.lambda.abs() * g.norm_sq.sqrt();
            if c.fired && config.alpha != 0.0 {
                axpy(config.alpha, &c.theta, x);
            }
        }
        SteeringMode::QOnly => {
            let violation = record.violation;
            if violation > 0.0 {
                let denom = layer.query_gradient_norm_sq + config.epsilon;
                let lambda = if denom > 0.0 { violation / denom } else { 0.0 };
                record.fired = true;
                record.theta_norm = lambda * layer.query_gradient_norm_sq.sqrt();
                query_scale = Some(config.alpha * lambda);
            }
        }
    }
    (record, query_scale)
}

/// [`StepHook`] that runs the steering controller at every steered layer and
/// collects one [`LayerRecord`] per layer per step.
#[derive(Debug)]
pub struct Steerer<'a> {
    context: &'a PrefillContext,
    config: &'a SteeringConfig,
    records: Vec<LayerRecord>,
    pending: Option<QueryUpdate>,
    capture_inputs: bool,
    timed: bool,
    hook_nanos: u64,
}

impl<'a> Steerer<'a> {
    #[must_use]
    pub fn new(context: &'a PrefillContext, config: &'a SteeringConfig) -> Self {
        Self {
            context,
            config,
            records: Vec::with_capacity(config.steered_layers.len()),
            pending: None,
            capture_inputs: false,
            timed: false,
            hook_nanos: 0,
        }
    }

    /// Keep a copy of every steered attention input in the records.
    #[must_use]
    pub fn capture_inputs(mut self, on: bool) -> Self {
        self.capture_inputs = on;
        self
    }

    /// Accumulate wall time spent inside the hook.
    #[must_use]
    pub fn timed(mut self, on: bool) -> Self {
        self.timed = on;
        self
    }

    /// Records gathered since the last call, in layer order.
    pub fn take_records(&mut self) -> Vec<LayerRecord> {
        std::mem::take(&mut self.records)
    }

    /// Hook time accumulated since the last call, in nanoseconds.
    pub fn take_hook_nanos(&mut self) -> u64 {
        std::mem::take(&mut self.hook_nanos)
    }
}

impl StepHook for Steerer<'_> {
    fn steer_input(&mut self, layer: usize, x: &mut [f64]) {
        let Some(steered) = self.context.layer(layer) else {
            return;
        };
        let start = self.timed.then(Instant::now);
        let (mut record, query_scale) = steering_hook(self.config, steered, x);
        if self.capture_inputs {
            record.steered_input = Some(x.to_vec());
        }
        self.pending = query_scale.map(|scale| QueryUpdate { layer, scale });
        self.records.push(record);
        if let Some(t) = start {
            self.hook_nanos += t.elapsed().as_nanos() as u64;
        }
    }

    fn steer_queries(&mut self, layer: usize, queries: &mut [f64]) {
        let Some(update) = self.pending else {
            return;
        };
        if update.layer != layer {
            return;
        }
        self.pending = None;
        if let Some(steered) = self.context.layer(layer) {
            axpy(update.scale, &steered.query_gradient, queries);
        }
    }
}

/// `gᵀθ` for a correction, handy for restoration checks.
///
/// # Errors
///
/// [`Error::Shape`] on length mismatch.
pub fn lift(g: &BarrierGradient, correction: &Correction) -> Result<f64> {
    dot(&g.g, &correction.theta)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grad(v: &[f64]) -> BarrierGradient {
        BarrierGradient::new(v.to_vec())
    }

    #[test]
    fn boundary_is_inactive() {
        let c = solve_correction(-5.0, &grad(&[1.0, 2.0]), -5.0, 1e-6);
        assert!(!c.fired);
        assert_eq!(c.theta, vec![0.0, 0.0]);
        assert_eq!(c.lambda, 0.0);
    }

    #[test]
    fn unit_violation_example() {
        let c = solve_correction(-1.0, &grad(&[2.0, 0.0]), 0.0, 0.0);
        assert!(c.fired);
        assert_eq!(c.lambda, 0.25);
        assert_eq!(c.theta, vec![0.5, 0.0]);
        assert_eq!(lift(&grad(&[2.0, 0.0]), &c).unwrap(), 1.0);
    }

    #[test]
    fn zero_gradient_fires_with_zero_direction() {
        let c = solve_correction(-10.0, &grad(&[0.0, 0.0, 0.0]), -5.0, 1e-6);
        assert!(c.fired);
        assert_eq!(c.theta, vec![0.0; 3]);
        let c = solve_correction(-10.0, &grad(&[0.0, 0.0]), -5.0, 0.0);
        assert_eq!(c.theta, vec![0.0; 2]);
    }

    #[test]
    fn oracle_examples() {
        assert_eq!(qp_oracle(3.0, &[1.0, 1.0], 2.0).unwrap(), vec![0.0, 0.0]);
        assert!(matches!(qp_oracle(0.0, &[0.0, 0.0], 1.0), Err(Error::Infeasible(_))));
        let t = qp_oracle(-1.0, &[2.0, 0.0], 0.0).unwrap();
        assert!((t[0] - 0.5).abs() < 1e-15 && t[1].abs() < 1e-15);
        let t = qp_oracle(-1.0, &[-2.0, 0.0], 0.0).unwrap();
        assert!((t[0] + 0.5).abs() < 1e-15 && t[1].abs() < 1e-15);
    }

    #[test]
    fn iterative_oracle_converges() {
        let g = [0.3, -1.2, 0.8, 2.0];
        let exact = qp_oracle(-3.0, &g, 1.0).unwrap();
        let approx = qp_oracle_iterative(-3.0, &g, 1.0, 10_000).unwrap();
        for (a, b) in exact.iter().zip(&approx) {
            assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn apply_examples() {
        let x = [0.1, -0.7];
        let c = solve_correction(-1.0, &grad(&[2.0, 0.0]), 0.0, 0.0);
        assert_eq!(apply_steering(&x, &c, 0.0).unwrap(), x.to_vec());
        let idle = solve_correction(1.0, &grad(&[2.0, 0.0]), 0.0, 0.0);
        assert_eq!(apply_steering(&x, &idle, 1.0).unwrap(), x.to_vec());
        assert!(apply_steering(&[1.0], &c, 1.0).is_err());
    }

    #[test]
    fn continuous_pulls_down_when_above_threshold() {
        let g = grad(&[1.0, 1.0]);
        let c = continuous_correction(3.0, &g, 1.0, 1e-6);
        assert!(c.fired);
        assert!(lift(&g, &c).unwrap() < 0.0);
    }

    #[test]
    fn single_head_query_correction_matches_input_space_form() {
        let qg = [0.5, -0.25, 1.0];
        let c = q_only_correction(-2.0, &qg, 0.0, 0.0);
        let expected = solve_correction(-2.0, &grad(&qg), 0.0, 0.0);
        assert_eq!(c, expected);
        assert!((dot(&qg, &c.theta).unwrap() - 2.0).abs() < 1e-12);
        let idle = q_only_correction(1.0, &qg, 0.0, 0.0);
        assert!(idle.theta.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn config_validation() {
        let cfg = SteeringConfig::default();
        cfg.validate(6).unwrap();
        assert!(cfg.validate(4).is_err());
        let bad = SteeringConfig {
            alpha: 0.0,
            ..SteeringConfig::default()
        };
        assert!(bad.validate(6).is_err());
        let off = SteeringConfig {
            alpha: 0.0,
            mode: SteeringMode::Off,
            ..SteeringConfig::default()
        };
        off.validate(6).unwrap();
        let neg = SteeringConfig {
            epsilon: -1.0,
            ..SteeringConfig::default()
        };
        assert!(neg.validate(6).is_err());
        let unsorted = SteeringConfig {
            steered_layers: vec![3, 2],
            ..SteeringConfig::default()
        };
        assert!(unsorted.validate(6).is_err());
    }

    #[test]
    fn mode_names_round_trip() {
        for m in SteeringMode::ALL {
            assert_eq!(m.as_str().parse::<SteeringMode>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.as_str()));
        }
        assert!("sideways".parse::<SteeringMode>().is_err());
    }
}
