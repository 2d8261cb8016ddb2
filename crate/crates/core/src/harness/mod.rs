//! Experiment configuration, runners, theory checks and output writers used
//! by the command-line tool.

mod config;
mod experiment;
mod output;
mod sweep;
mod theory;

pub use config::{
    DataSource, ExperimentConfig, ExperimentKind, PolicyParams, Schedule, SimilarityMethod, SimilarityParams,
    SweepParams, TheoryParams, TraceParams,
};
pub use experiment::{
    estimate_similarity, mean_curve, run_bandit_experiment, run_similarity, warmup_kernels, BanditReport,
    EnvFactory, ExperimentEnv, MethodResult, SeedRun, SimilarityEstimate, WarmupKernels,
};
pub use output::{
    bandit_outputs, similarity_outputs, sweep_outputs, theory_outputs, Format, Manifest, OutputSet, MANIFEST_FILE,
    TOOL_NAME,
};
pub use sweep::{multitask_mse, run_sim_sweep, SweepRow, SweepTable};
pub use theory::{
    check_monotonicity, compute_log_g, numerical_rank, random_low_rank_similarity, rank_bound, run_theory_checks,
    MonotonicityCheck, RankBoundCase, TheoryReport, MONOTONE_TOL,
};
