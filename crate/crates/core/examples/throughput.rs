// SPDX-License-Identifier: MIT OR Apache-2.0

//! Steered versus unsteered decode speed and per-layer hook cost.

use barrier_steer::harness::{throughput_bench, BenchConfig, RunConfig};

fn main() -> barrier_steer::Result<()> {
    let cfg = RunConfig::default();
    let p = cfg.prepare()?;
    let bench = BenchConfig {
        n_tokens: 30,
        n_runs: 10,
        scaling_repeats: 50,
        ..BenchConfig::default()
    };
    let prompts: Vec<_> = (0..=bench.n_runs).map(|i| p.task.prompt(i).prompt).collect();
    let t = throughput_bench(&p.weights, &prompts, &p.steering, &bench)?;
    let c = &t.steered_vs_unsteered;
    println!("{} {:.0} tok/s, {} {:.0} tok/s, ratio {:.3}", c.label_a, c.tokens_per_sec_a, c.label_b, c.tokens_per_sec_b, c.ratio);
    for pt in &t.overhead.points {
        println!("{:2} steered layers: {:.0} ns per step", pt.steered_layers, pt.nanos_per_step);
    }
    println!("slope {:.1} ns/layer, R² {:.3}", t.overhead.fit.slope, t.overhead.fit.r_squared);
    Ok(())
}
