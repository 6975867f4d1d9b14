// SPDX-License-Identifier: MIT OR Apache-2.0

//! Barrier-regulated closed-form steering for a toy multi-head decoder.
//!
//! A steered layer exposes a scalar grounding barrier: the mean pre-softmax
//! score from the current queries to the cached image keys. Because the
//! keys are fixed after prefill, the barrier is exactly linear in the
//! attention input, so the smallest correction that lifts it to a threshold
//! has a closed form. The controller applies that correction only when the
//! barrier falls below the threshold, and the corrected vector drives the
//! query, key and value of the step.
//!
//! Modules:
//!
//! - [`numeric`]: dense `f64` kernels and a seeded random stream.
//! - [`model`]: the decoder, KV cache, prefill, sampling and the decode loop.
//! - [`barrier`]: barrier value and its closed-form gradient.
//! - [`steering`]: the minimum-norm correction, QP oracles and the controller.
//! - [`harness`]: a synthetic grounding task, experiments, statistics,
//!   benchmarks and report files.

pub mod barrier;
pub mod error;
pub mod harness;
pub mod model;
pub mod numeric;
pub mod steering;
pub mod trace;

pub use error::{Error, Result};
