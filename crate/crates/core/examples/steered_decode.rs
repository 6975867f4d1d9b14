// SPDX-License-Identifier: MIT OR Apache-2.0

//! One synthetic prompt decoded with each steering mode.

use barrier_steer::harness::{run_prompt, Label, RunConfig};
use barrier_steer::steering::SteeringMode;

fn main() -> barrier_steer::Result<()> {
    let cfg = RunConfig::default();
    let p = cfg.prepare()?;
    let prompt = p.task.prompt(5);
    println!("tau {:.4}, objects in image {:?}", p.steering.tau, prompt.objects);
    for mode in SteeringMode::ALL {
        let run = run_prompt(&p.task, &p.weights, &prompt, &p.steering.with_mode(mode), &cfg.experiment)?;
        let hallucinated: Vec<u32> = run
            .tokens
            .iter()
            .zip(&run.labels)
            .filter(|(_, l)| **l == Label::Hallucinated)
            .map(|(t, _)| *t)
            .collect();
        let fired: usize = run.trace.steps.iter().map(|s| s.fired_layers()).sum();
        println!(
            "{:>10}: {} tokens, recalled {}/{}, hallucinated {hallucinated:?}, fired {fired}",
            mode.as_str(),
            run.tokens.len(),
            run.recalled(),
            run.objects.len()
        );
    }
    Ok(())
}
