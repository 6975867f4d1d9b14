// SPDX-License-Identifier: MIT OR Apache-2.0

//! Command-line front end.
//!
//! Exit codes: 0 success, 1 config error, 2 numeric or runtime error, 3 I/O.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use barrier_steer::harness::{
    ablation_suite, bin_analysis, calibration_barriers, emit_reports, object_samples, quantile, read_traces,
    run_experiment, run_prompt, run_selftest, samples_from_rows, throughput_bench, AblationGrids,
    BarrierSource, BenchConfig, Label, RunConfig, ReportStatus, Results,
};
use barrier_steer::steering::SteeringMode;
use barrier_steer::{Error, Result};
use clap::{Args, Parser, Subcommand};

/// Calibration quantiles that define the default τ sweep.
const TAU_QUANTILES: [f64; 5] = [0.1, 0.2, 0.3, 0.5, 0.7];

#[derive(Parser)]
#[command(name = "barrier-steer", version, about = "Barrier-regulated attention steering on a toy decoder")]
struct Cli {
    /// Worker threads for experiment runs (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Run config JSON; omitted means all defaults.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<RunConfig> {
        match &self.config {
            Some(p) => RunConfig::load(p),
            None => Ok(RunConfig::default()),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the oracle and invariant checks.
    Selftest {
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Decode one prompt and print its tokens and trace summary.
    Decode {
        #[command(flatten)]
        config: ConfigArg,
        /// Prompt index.
        #[arg(long, default_value_t = 0)]
        prompt: usize,
        /// Override the steering mode.
        #[arg(long)]
        mode: Option<SteeringMode>,
    },
    /// Run the configured experiment next to an unsteered baseline.
    Run {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// One-at-a-time sweeps over α, τ, the lowest steered layer and the mode.
    Ablate {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Grid overrides as JSON.
        #[arg(long)]
        grids: Option<PathBuf>,
    },
    /// Decode throughput and steering overhead.
    Bench {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        n_tokens: usize,
        #[arg(long, default_value_t = 30)]
        n_runs: usize,
    },
    /// Bin a traces.csv by barrier and plot hallucination rate per bin.
    Analyze {
        traces: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Mode whose rows are binned.
        #[arg(long, default_value = "off")]
        mode: SteeringMode,
        /// Bin on one steered layer instead of the mean over steered layers.
        #[arg(long)]
        layer: Option<usize>,
    },
}

fn report(results: &Results, out: &Path) -> Result<()> {
    match emit_reports(results, out)? {
        ReportStatus::Written(files) => {
            for f in files {
                println!("wrote {}", f.display());
            }
        }
        ReportStatus::Empty => println!("no results; nothing written"),
    }
    Ok(())
}

fn selftest(seed: u64) -> Result<()> {
    let checks = run_selftest(seed);
    let failed = checks.iter().filter(|c| !c.passed).count();
    for c in &checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    if failed > 0 {
        return Err(Error::NonFinite(format!("{failed} selftest checks failed")));
    }
    Ok(())
}

fn decode(cfg: &RunConfig, index: usize, mode: Option<SteeringMode>) -> Result<()> {
    let prepared = cfg.prepare()?;
    let steering = mode.map_or(prepared.steering.clone(), |m| prepared.steering.with_mode(m));
    let run = run_prompt(
        &prepared.task,
        &prepared.weights,
        &prepared.task.prompt(index),
        &steering,
        &cfg.experiment,
    )?;
    println!("mode {} tau {:.6} alpha {}", steering.mode, steering.tau, steering.alpha);
    println!("objects {:?}", run.objects);
    println!("tokens  {:?}", run.tokens);
    for (step, label) in run.trace.steps.iter().zip(&run.labels) {
        let mark = match label {
            Label::Other => "",
            Label::Grounded => " grounded",
            Label::Hallucinated => " HALLUCINATED",
        };
        let h = step.mean_barrier().map_or(String::from("-"), |h| format!("{h:.4}"));
        println!(
            "step {:3} token {:3} mean_h {h} fired {}/{}{mark}",
            step.step,
            step.token,
            step.fired_layers(),
            step.layers.len()
        );
    }
    Ok(())
}

fn run(cfg: &RunConfig, out: &Path) -> Result<()> {
    let prepared = cfg.prepare()?;
    let mut modes = vec![SteeringMode::Off];
    if prepared.steering.mode != SteeringMode::Off {
        modes.push(prepared.steering.mode);
    }
    let mut results = Results::default();
    for mode in modes {
        let e = run_experiment(
            &prepared.task,
            &prepared.weights,
            &prepared.steering.with_mode(mode),
            &cfg.experiment,
        )?;
        let s = &e.summary;
        println!(
            "{:>10}: hallucination {} recall {:.4} fired {:.4} length {:.2}",
            s.mode.as_str(),
            s.hallucination_rate.map_or("undefined".into(), |r| format!("{r:.4}")),
            s.object_recall,
            s.mean_fired_fraction,
            s.mean_length
        );
        if mode == SteeringMode::Off {
            let samples = object_samples(&e.runs, BarrierSource::MeanSteered);
            match bin_analysis(&samples) {
                Ok(b) => results.bins = Some(b),
                Err(Error::TooFewTokens { got, .. }) => {
                    eprintln!("skipping bins: only {got} object tokens");
                }
                Err(e) => return Err(e),
            }
        }
        results.experiments.push(e);
    }
    report(&results, out)
}

fn ablate(cfg: &RunConfig, out: &Path, grids: Option<&Path>) -> Result<()> {
    let grids: AblationGrids = match grids {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.to_path_buf(),
                source: e,
            })?;
            serde_json::from_str(&text)?
        }
        None => AblationGrids::default(),
    };
    let prepared = cfg.prepare()?;
    let tau_grid: Vec<f64> = if grids.tau.is_empty() {
        let hs = calibration_barriers(&prepared.task, &prepared.weights, &prepared.steering, &cfg.experiment)?;
        TAU_QUANTILES
            .iter()
            .map(|&q| quantile(&hs, q))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let tables = ablation_suite(
        &prepared.task,
        &prepared.weights,
        &prepared.steering,
        &cfg.experiment,
        &grids,
        &tau_grid,
    )?;
    for t in &tables {
        for r in &t.rows {
            println!(
                "{:>12} {:>22}: hallucination {} recall {:.4}",
                r.parameter,
                r.value,
                r.summary.hallucination_rate.map_or("undefined".into(), |v| format!("{v:.4}")),
                r.summary.object_recall
            );
        }
    }
    report(
        &Results {
            ablation: tables,
            ..Results::default()
        },
        out,
    )
}

fn bench(cfg: &RunConfig, out: &Path, n_tokens: usize, n_runs: usize) -> Result<()> {
    let prepared = cfg.prepare()?;
    let bench = BenchConfig {
        n_tokens,
        n_runs,
        ..BenchConfig::default()
    };
    let prompts: Vec<_> = (0..n_runs + 1)
        .map(|i| prepared.task.prompt(cfg.experiment.first_prompt + i).prompt)
        .collect();
    let t = throughput_bench(&prepared.weights, &prompts, &prepared.steering, &bench)?;
    let c = &t.steered_vs_unsteered;
    println!(
        "{} {:.1} tok/s, {} {:.1} tok/s, ratio {:.4}",
        c.label_a, c.tokens_per_sec_a, c.label_b, c.tokens_per_sec_b, c.ratio
    );
    for p in &t.overhead.points {
        println!("steered layers {:2}: {:.1} ns/step", p.steered_layers, p.nanos_per_step);
    }
    println!(
        "overhead fit: {:.2} ns/layer, R² {:.4}",
        t.overhead.fit.slope, t.overhead.fit.r_squared
    );
    report(
        &Results {
            throughput: Some(t),
            ..Results::default()
        },
        out,
    )
}

fn analyze(traces: &Path, out: &Path, mode: SteeringMode, layer: Option<usize>) -> Result<()> {
    let rows = read_traces(traces)?;
    let source = layer.map_or(BarrierSource::MeanSteered, BarrierSource::Layer);
    let samples = samples_from_rows(&rows, mode, source);
    let bins = bin_analysis(&samples)?;
    for b in &bins.bins {
        println!(
            "bin {} count {:4} rate {:.4} [{:.4}, {:.4}] barrier [{:.4}, {:.4}]",
            b.index, b.count, b.rate, b.lo, b.hi, b.barrier_min, b.barrier_max
        );
    }
    report(
        &Results {
            bins: Some(bins),
            ..Results::default()
        },
        out,
    )
}

fn dispatch(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Selftest { seed } => selftest(seed),
        Command::Decode {
            config,
            prompt,
            mode,
        } => decode(&config.load()?, prompt, mode),
        Command::Run { config, out } => run(&config.load()?, &out),
        Command::Ablate { config, out, grids } => ablate(&config.load()?, &out, grids.as_deref()),
        Command::Bench {
            config,
            out,
            n_tokens,
            n_runs,
        } => bench(&config.load()?, &out, n_tokens, n_runs),
        Command::Analyze {
            traces,
            out,
            mode,
            layer,
        } => analyze(&traces, &out, mode, layer),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
