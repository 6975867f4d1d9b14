// SPDX-License-Identifier: MIT OR Apache-2.0

//! Threshold choice from step-0 barriers on held-out calibration prompts.

use barrier_steer::harness::{calibration_barriers, quantile, RunConfig};

fn main() -> barrier_steer::Result<()> {
    let cfg = RunConfig::default();
    let p = cfg.prepare()?;
    let hs = calibration_barriers(&p.task, &p.weights, &p.steering, &cfg.experiment)?;
    println!("{} calibration barriers", hs.len());
    for q in [0.1, 0.3, 0.5, 0.9] {
        println!("quantile {q:.1}: {:+.4}", quantile(&hs, q)?);
    }
    println!("configured tau {:+.4}", p.steering.tau);
    Ok(())
}
