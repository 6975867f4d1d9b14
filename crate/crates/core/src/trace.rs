// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-step decode records.

use crate::steering::LayerRecord;

/// One generated token and the steering decisions taken while producing it.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    /// Cache position of the input fed at this step.
    pub position: usize,
    /// Token emitted from this step's logits.
    pub token: u32,
    /// One entry per steered layer, ascending.
    pub layers: Vec<LayerRecord>,
    /// Wall time of the step; zero unless timing was requested.
    pub elapsed_nanos: u64,
    /// Time inside the steering hook; zero unless timing was requested.
    pub hook_nanos: u64,
}

impl StepRecord {
    /// Mean barrier over the steered layers, `None` without steered layers.
    #[must_use]
    pub fn mean_barrier(&self) -> Option<f64> {
        (!self.layers.is_empty())
            .then(|| self.layers.iter().map(|r| r.h).sum::<f64>() / self.layers.len() as f64)
    }

    #[must_use]
    pub fn fired_layers(&self) -> usize {
        self.layers.iter().filter(|r| r.fired).count()
    }
}

/// Everything observed during one generation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DecodeTrace {
    pub steps: Vec<StepRecord>,
}

impl DecodeTrace {
    #[must_use]
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    #[must_use]
    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// All (step, layer) records in order.
    pub fn records(&self) -> impl Iterator<Item = (&StepRecord, &LayerRecord)> {
        self.steps
            .iter()
            .flat_map(|s| s.layers.iter().map(move |r| (s, r)))
    }

    #[must_use]
    pub fn tokens(&self) -> Vec<u32> {
        self.steps.iter().map(|s| s.token).collect()
    }
}
