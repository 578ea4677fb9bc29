//! The full staged pipeline on the g-and-k distribution with 10% of the
//! observations shifted by −50, run from the bundled config.
//!
//! `cargo run --release --example gandk_robustness -- [budget] [epochs]`
//! shrinks the run; the defaults reproduce the bundled experiment.

use std::path::Path;

use nsm_bayes::pipeline::{execute, ExperimentConfig, MetricsReport, RunOptions, StageName};

fn main() -> nsm_bayes::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut cfg = ExperimentConfig::load(
        &Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/gandk_small.cfg"),
    )?;
    if let Some(&budget) = args.first() {
        cfg.budget = budget;
    }
    if let Some(&epochs) = args.get(1) {
        cfg.train.max_epochs = epochs;
    }
    let out = tempfile::tempdir()?;
    execute(&cfg, StageName::Run, &RunOptions::new(out.path())).map_err(|f| f.source)?;
    let report: MetricsReport = nsm_bayes::io::read_json(&out.path().join("metrics/metrics.json"))?;
    println!("theta*          {:?}", report.theta_star);
    println!(
        "posterior mean  {:?}",
        report
            .posterior_mean
            .iter()
            .map(|v| format!("{v:.3}"))
            .collect::<Vec<_>>()
    );
    println!(
        "beta {:.4}, mse {:.3}, covered {:?}",
        report.beta,
        report.mse.unwrap_or(f64::NAN),
        report.covered
    );
    println!(
        "{} of {} observations contaminated",
        report.contaminated, report.n
    );
    Ok(())
}
