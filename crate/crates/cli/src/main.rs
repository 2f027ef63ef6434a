use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use nimbus_core::crowd::{calibrate, CalibrationGrid, CalibrationTargets, CrowdProfile};
use nimbus_core::harness::{
    compare, default_strategy, read_report, run_experiment, write_experiment, DEFAULT_SEED,
};

#[derive(Parser)]
#[command(name = "nimbus", version, about = "Crowd labeling broker")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run seeded simulated trials of one strategy.
    RunExperiment {
        #[arg(long, value_parser = ["one-shot", "rollover", "parallel"])]
        strategy: String,
        /// Crowd profile TOML; the shipped paper2016 profile when omitted.
        #[arg(long)]
        profile: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
        /// Directory for report.json and trials.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Tabulate experiment directories side by side.
    Compare {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Fit a crowd profile to latency and quality targets.
    Calibrate {
        /// Targets TOML; the reference summaries when omitted.
        #[arg(long)]
        targets: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
        /// Longest rollover chain to search.
        #[arg(long)]
        stages: Option<u32>,
        #[arg(long)]
        replications: Option<usize>,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn load_profile(path: Option<&Path>) -> anyhow::Result<CrowdProfile> {
    match path {
        Some(p) => CrowdProfile::load(p).with_context(|| format!("loading profile {}", p.display())),
        None => Ok(CrowdProfile::paper2016()),
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::RunExperiment {
            strategy,
            profile,
            trials,
            seed,
            out,
        } => {
            let profile = load_profile(profile.as_deref())?;
            let Some(config) = default_strategy(&strategy, &profile) else {
                bail!("unknown strategy {strategy}");
            };
            let report = run_experiment(&config, &profile, trials, seed)?;
            write_experiment(&out, &report)?;
            print!("{}", compare(std::slice::from_ref(&report))?.table);
            if !report.excluded.is_empty() {
                eprintln!("{} trial(s) excluded", report.excluded.len());
            }
        }
        Command::Compare { dirs, csv } => {
            let reports = dirs
                .iter()
                .map(|d| read_report(d).with_context(|| format!("reading {}", d.display())))
                .collect::<anyhow::Result<Vec<_>>>()?;
            let c = compare(&reports)?;
            print!("{}", c.table);
            if let Some(path) = csv {
                std::fs::write(&path, c.csv).with_context(|| format!("writing {}", path.display()))?;
            }
        }
        Command::Calibrate {
            targets,
            out,
            seed,
            stages,
            replications,
        } => {
            let mut t = match targets {
                Some(p) => CalibrationTargets::load(&p)?,
                None => CalibrationTargets::paper2016(),
            };
            if let Some(k) = stages {
                t.max_stages = k;
            }
            let mut grid = CalibrationGrid::default();
            if let Some(r) = replications {
                grid.replications = r;
            }
            let fit = calibrate(&t, &grid, seed)?;
            fit.profile.save(&out)?;
            println!("{}", serde_json::to_string_pretty(&fit)?);
        }
        Command::Serve { config } => serve(config)?,
    }
    Ok(())
}

fn serve(config: Option<PathBuf>) -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let config = nimbus_service::ServiceConfig::load(config.as_deref())?;
    nimbus_service::run(config)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({
                "error": format!("{e:#}"),
                "kind": error_kind(&e),
            });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    use nimbus_core::crowd::{CalibrationError, ProfileError};
    use nimbus_core::harness::HarnessError;
    if let Some(c) = e.downcast_ref::<CalibrationError>() {
        return match c {
            CalibrationError::NonConvergence { .. } => "non_convergence",
            _ => "calibration",
        };
    }
    if e.downcast_ref::<ProfileError>().is_some() {
        return "profile";
    }
    if e.downcast_ref::<HarnessError>().is_some() {
        return "experiment";
    }
    if e.downcast_ref::<nimbus_service::ConfigError>().is_some() {
        return "config";
    }
    if e.downcast_ref::<nimbus_service::RunError>().is_some() {
        return "service";
    }
    if e.downcast_ref::<std::io::Error>().is_some() {
        return "io";
    }
    "error"
}
