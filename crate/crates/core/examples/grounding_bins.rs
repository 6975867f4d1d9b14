// SPDX-License-Identifier: MIT OR Apache-2.0

//! Hallucination rate per barrier bin with Wilson intervals, unsteered.

use barrier_steer::harness::{bin_analysis, object_samples, run_experiment, BarrierSource, ExperimentConfig, RunConfig};
use barrier_steer::steering::SteeringMode;

fn main() -> barrier_steer::Result<()> {
    let cfg = RunConfig {
        experiment: ExperimentConfig {
            n_prompts: 200,
            ..ExperimentConfig::default()
        },
        ..RunConfig::default()
    };
    let p = cfg.prepare()?;
    let e = run_experiment(&p.task, &p.weights, &p.steering.with_mode(SteeringMode::Off), &cfg.experiment)?;
    let report = bin_analysis(&object_samples(&e.runs, BarrierSource::MeanSteered))?;
    for b in &report.bins {
        println!(
            "bin {} h [{:+.3}, {:+.3}] n {:4} rate {:.3} [{:.3}, {:.3}]",
            b.index, b.barrier_min, b.barrier_max, b.count, b.rate, b.lo, b.hi
        );
    }
    Ok(())
}
