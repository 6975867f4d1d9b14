// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic grounding task, experiment runner, statistics and reports.

pub mod ablation;
pub mod bench;
pub mod config;
pub mod experiment;
pub mod report;
pub mod selftest;
pub mod stats;
pub mod task;

pub use ablation::{ablation_suite, AblationGrids, AblationRow, AblationTable, GATE_CLOSED_TAU};
pub use bench::{
    complexity, compare_throughput, overhead_scaling, random_prompts, spread_layers,
    throughput_bench, timer_granularity, BenchConfig, Complexity, OverheadPoint, OverheadScaling,
    ThroughputComparison, ThroughputReport,
};
pub use config::{Prepared, RunConfig, TauChoice};
pub use experiment::{
    barrier_by_step, calibrate_tau, calibration_barriers, hallucination_rate, label_tokens, object_recall, quantile,
    run_experiment, run_prompt, selectivity_stats, summarize, Experiment, ExperimentConfig, Label,
    PromptRun, Selectivity, Summary,
};
pub use report::{
    emit_reports, parse_traces, read_traces, samples_from_rows, ReportStatus, Results, TraceRow,
    SCHEMA_VERSION,
};
pub use selftest::{run_selftest, Check};
pub use stats::{
    bin_analysis, bin_sizes, linear_fit, object_samples, wilson_interval, BarrierSource, Bin,
    BinReport, LinearFit, N_BINS, Z_95,
};
pub use task::{
    build_synthetic_task, build_with_circuit, Circuit, SyntheticTask, TaskConfig, TaskPrompt,
    TASK_D_MODEL,
};
