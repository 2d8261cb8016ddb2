use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use mtbandit::harness::{
    bandit_outputs, run_bandit_experiment, run_sim_sweep, run_similarity, run_theory_checks, similarity_outputs,
    sweep_outputs, theory_outputs, DataSource, ExperimentConfig, ExperimentKind, Format, Manifest, OutputSet,
    MANIFEST_FILE,
};
use mtbandit::Error;

/// Multi-task kernel bandit experiments.
#[derive(Parser, Debug)]
#[command(name = "mtbandit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Test error of multi-task regression against the assumed similarity.
    SimSweep(Common),
    /// Regret of each similarity method on the synthetic environment.
    Bandit(Common),
    /// Regret of each similarity method on a trace-driven environment.
    Trace(Common),
    /// Numerical checks of the information-gain bounds.
    Theory(Common),
    /// Estimate task-similarity matrices and cache them as CSV.
    Similarity(Common),
}

#[derive(Args, Debug)]
struct Common {
    /// Config file (TOML, or JSON such as a previous run's manifest).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run only this seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `out_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::SimSweep(_) => "sim-sweep",
            Command::Bandit(_) => "bandit",
            Command::Trace(_) => "trace",
            Command::Theory(_) => "theory",
            Command::Similarity(_) => "similarity",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::SimSweep(c)
            | Command::Bandit(c)
            | Command::Trace(c)
            | Command::Theory(c)
            | Command::Similarity(c) => c,
        }
    }

    fn kind(&self) -> Option<ExperimentKind> {
        match self {
            Command::SimSweep(_) => Some(ExperimentKind::SimSweep),
            Command::Bandit(_) => Some(ExperimentKind::SyntheticBandit),
            Command::Trace(_) => Some(ExperimentKind::TraceBandit),
            Command::Theory(_) => Some(ExperimentKind::TheoryChecks),
            Command::Similarity(_) => None,
        }
    }
}

fn load_config(cmd: &Command) -> mtbandit::Result<ExperimentConfig> {
    let common = cmd.common();
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(out) = &common.out {
        cfg.out_dir = Some(out.clone());
    }
    match cmd.kind() {
        Some(kind) => cfg.for_kind(kind),
        None => {
            cfg.validate()?;
            if cfg.similarity.source == DataSource::Trace && cfg.trace.path.is_none() {
                return Err(Error::Config("trace.path is required".into()));
            }
            Ok(cfg)
        }
    }
}

fn summarize_bandit(report: &mtbandit::harness::BanditReport) {
    for m in &report.methods {
        println!(
            "{:<9} mean cumulative regret {:.3}",
            m.method.name(),
            m.mean_final_regret()
        );
    }
}

fn execute(cmd: &Command, cfg: &ExperimentConfig) -> mtbandit::Result<OutputSet> {
    let format = cmd.common().format.map(|f| match f {
        FormatArg::Csv => Format::Csv,
        FormatArg::Json => Format::Json,
    });
    let mut out = match cmd {
        Command::SimSweep(_) => {
            let table = run_sim_sweep(&cfg.sweep)?;
            let best = table.argmin();
            println!("minimum mean MSE {:.5} at sim_train {:.2}", best.mean_mse, best.sim_train);
            sweep_outputs(&table, format.unwrap_or(Format::Csv))?
        }
        Command::Bandit(_) | Command::Trace(_) => {
            let source = if matches!(cmd, Command::Trace(_)) {
                DataSource::Trace
            } else {
                DataSource::Synthetic
            };
            let report = run_bandit_experiment(cfg, source)?;
            summarize_bandit(&report);
            bandit_outputs(&report, format.unwrap_or(Format::Csv))?
        }
        Command::Theory(_) => {
            let report = run_theory_checks(&cfg.theory, cfg.seeds[0])?;
            println!(
                "rank bound violations {}/{}, monotonicity violations {}",
                report.rank_violations(),
                report.rank_bound.len(),
                report.monotonicity_violations()
            );
            theory_outputs(&report, format.unwrap_or(Format::Json))?
        }
        Command::Similarity(_) => similarity_outputs(&run_similarity(cfg)?, format.unwrap_or(Format::Csv))?,
    };
    out.add_json(MANIFEST_FILE, &Manifest::new(cmd.name(), cfg))?;
    Ok(out)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let cfg = match load_config(&cli.command) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(1);
        }
    };
    let dir = cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("runs"));
    let result = execute(&cli.command, &cfg).and_then(|out| out.write_to(&dir));
    match result {
        Ok(paths) => {
            println!("wrote {} files to {}", paths.len(), dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
