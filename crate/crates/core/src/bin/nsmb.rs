//! `nsmb`: run experiment stages from a TOML config.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use nsm_bayes::pipeline::{execute, exit_code, ExperimentConfig, RunOptions, StageName};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StageArg {
    Simulate,
    Train,
    Calibrate,
    Infer,
    Metrics,
    Run,
}

impl From<StageArg> for StageName {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::Simulate => StageName::Simulate,
            StageArg::Train => StageName::Train,
            StageArg::Calibrate => StageName::Calibrate,
            StageArg::Infer => StageName::Infer,
            StageArg::Metrics => StageName::Metrics,
            StageArg::Run => StageName::Run,
        }
    }
}

/// Robust amortised simulation-based inference experiments.
#[derive(Debug, Parser)]
#[command(version)]
struct Cli {
    /// Stage to run; `run` executes simulate, train, calibrate, infer and metrics.
    #[arg(value_enum, conflicts_with = "stage_flag")]
    stage: Option<StageArg>,
    /// Same as the positional stage.
    #[arg(long = "stage", value_enum, id = "stage_flag")]
    stage_flag: Option<StageArg>,
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to `output_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Earlier run directories whose stage outputs may be reused.
    #[arg(long)]
    from: Vec<PathBuf>,
    /// Observed data CSV used instead of simulating `x°`.
    #[arg(long)]
    observed: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; defaults to the available cores.
    #[arg(long)]
    workers: Option<usize>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let stage: StageName = cli.stage.or(cli.stage_flag).unwrap_or(StageArg::Run).into();
    if let Some(n) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: cannot start {n} workers: {e}");
            return ExitCode::from(2);
        }
    }
    let cfg = match ExperimentConfig::load(&cli.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(exit_code(&e) as u8);
        }
    };
    let cfg = match cli.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    };
    let Some(out) = cli.out.or_else(|| cfg.output_dir.clone()) else {
        eprintln!("error: no output directory (pass --out or set output_dir)");
        return ExitCode::from(2);
    };
    let opts = RunOptions {
        out,
        from: cli.from,
        observed: cli.observed,
    };
    match execute(&cfg, stage, &opts) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(exit_code(&f.source) as u8)
        }
    }
}
