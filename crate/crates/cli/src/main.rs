//! `fbfqv <experiment> --config path [--set k=v ...] [--seed u64] [--out dir]`
//!
//! Exit status: 0 when every check of the run passed, 2 for a statistical
//! rejection (or a check that could not be decided), 1 for an execution
//! error. The worker count is read from `FBFQV_WORKERS`.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::Parser;
use fbfqv::experiment::{run_experiment, ExperimentConfig, ExperimentReport, RunStatus};

#[derive(Debug, Parser)]
#[command(name = "fbfqv", version, about = "Quadratic variation experiments on Poisson-Delaunay triangulations")]
struct Args {
    /// clt-v2, clt-v3, typical, variance, verify-lemmas or intensities.
    experiment: String,
    /// JSON configuration; defaults apply to omitted keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set caps.max_field_points=8000`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Overrides `master_seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load_config(args: &Args) -> anyhow::Result<ExperimentConfig> {
    let text = match &args.config {
        Some(path) => fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?,
        None => "{}".to_string(),
    };
    let mut overrides = vec![("experiment".to_string(), args.experiment.clone())];
    for s in &args.sets {
        let Some((k, v)) = s.split_once('=') else {
            bail!("--set expects KEY=VALUE, got `{s}`");
        };
        overrides.push((k.trim().to_string(), v.to_string()));
    }
    let mut config = ExperimentConfig::from_json_with_overrides(&text, &overrides)?;
    if let Some(seed) = args.seed {
        config.master_seed = seed;
    }
    if let Some(out) = &args.out {
        config.output_dir = out.clone();
    }
    config.validate()?;
    Ok(config)
}

fn print_report(report: &ExperimentReport) {
    println!(
        "{} finished in {:.1}s: {:?}",
        report.config.experiment.as_str(),
        report.elapsed_seconds,
        report.status
    );
    for (kind, stat) in &report.statistics {
        let s = &stat.summary;
        println!(
            "  {kind}: n = {}, mean = {:.5}, variance = {:.5}, skewness = {:.4}, excess kurtosis = {:.4}",
            s.n, s.mean, s.variance, s.skewness, s.excess_kurtosis
        );
    }
    for check in &report.checks {
        println!("  [{:?}] {}: {}", check.outcome, check.name, check.detail);
    }
    for err in report.errors.iter().take(5) {
        println!("  replicate {}: {}", err.replicate, err.message);
    }
    if report.errors.len() > 5 {
        println!("  ... {} more replicate errors", report.errors.len() - 5);
    }
    println!("  output: {}", report.config.output_dir.display());
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let config = match load_config(&args) {
        Ok(c) => c,
        Err(e) => {
            log::error!("{e:#}");
            return ExitCode::from(1);
        }
    };
    match run_experiment(&config) {
        Ok(report) => {
            print_report(&report);
            ExitCode::from(report.status.exit_code() as u8)
        }
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(RunStatus::Error.exit_code() as u8)
        }
    }
}
