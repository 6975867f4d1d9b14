// SPDX-License-Identifier: MIT OR Apache-2.0

//! Small α and lowest-layer sweeps on the synthetic task.

use barrier_steer::harness::{ablation_suite, AblationGrids, ExperimentConfig, RunConfig};

fn main() -> barrier_steer::Result<()> {
    let cfg = RunConfig {
        experiment: ExperimentConfig {
            n_prompts: 60,
            ..ExperimentConfig::default()
        },
        ..RunConfig::default()
    };
    let p = cfg.prepare()?;
    let grids = AblationGrids {
        alpha: vec![0.25, 0.5, 1.0, 1.5],
        lower_layer: vec![1, 2, 3],
        ..AblationGrids::default()
    };
    let tau = p.steering.tau;
    let tables = ablation_suite(&p.task, &p.weights, &p.steering, &cfg.experiment, &grids, &[tau - 1.0, tau, tau + 1.0])?;
    for t in &tables {
        println!("{}", t.name);
        for r in &t.rows {
            println!(
                "  {:>22}: hallucination {} recall {:.3}",
                r.value,
                r.summary.hallucination_rate.map_or("undefined".into(), |v| format!("{v:.3}")),
                r.summary.object_recall
            );
        }
    }
    Ok(())
}
