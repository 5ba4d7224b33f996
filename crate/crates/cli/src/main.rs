//! `ddnfl`: collect data, train, verify, fine-tune and report.

mod commands;
mod config;
mod error;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ddnfl::scenario::Scenario;

use crate::commands::ReportInputs;
use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(name = "ddnfl", version, about = "Data-driven NN controller design for unknown LTI plants")]
struct Cli {
    /// TOML config, a built-in scenario name, or a manifest.json to replay.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed for data collection, initialization and demos.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Worker threads for seed sweeps.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Overrides the SDP solver tolerance.
    #[arg(long, global = true)]
    solver_tol: Option<f64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one open-loop experiment and write u.csv, x0.csv, x1.csv.
    Collect,
    /// Train a certified controller from data and expert demonstrations.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Number of consecutive seeds to train, starting at the config seed.
        #[arg(long, default_value_t = 1)]
        seeds: usize,
    },
    /// Check a fixed controller against the data; exit 6 without a certificate.
    Verify {
        #[arg(long)]
        controller: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Minimally perturb a controller until it is certified.
    Finetune {
        #[arg(long)]
        controller: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Write plot data: ROA slices, closed-loop norms and loss curves.
    Report {
        #[arg(long)]
        certificate: Option<PathBuf>,
        #[arg(long)]
        controller: Vec<PathBuf>,
        #[arg(long)]
        trace: Option<PathBuf>,
        /// 1-based slice dimensions, e.g. `1,3`; repeatable.
        #[arg(long, value_parser = parse_dims)]
        dims: Vec<[usize; 2]>,
    },
}

fn parse_dims(s: &str) -> Result<[usize; 2], String> {
    let (a, b) = s.split_once(',').ok_or("expected i,j")?;
    Ok([a.trim().parse().map_err(|_| "bad index")?, b.trim().parse().map_err(|_| "bad index")?])
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| CliError::Config("--config is required (a file or one of: vehicle-lateral, scalar-demo)".into()))?;
    let mut cfg = match path.to_str() {
        Some(name) if !path.exists() && Scenario::names().contains(&name) => RunConfig::from_scenario(name)?,
        _ => RunConfig::load(path)?,
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(tol) = cli.solver_tol {
        if !(tol > 0.0) {
            return Err(CliError::Config("--solver-tol must be positive".into()));
        }
        cfg.solver.tol = tol;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global()
            .map_err(|e| CliError::Internal(e.to_string()))?;
    }
    let cfg = load_config(cli)?;
    let out: &Path = &cli.out_dir;
    match &cli.command {
        Command::Collect => commands::collect_cmd(&cfg, out),
        Command::Train { data, seeds } => commands::train_cmd(&cfg, data, out, *seeds),
        Command::Verify { controller, data } => commands::verify_cmd(&cfg, controller, data, out),
        Command::Finetune { controller, data } => commands::finetune_cmd(&cfg, controller, data, out),
        Command::Report { certificate, controller, trace, dims } => commands::report_cmd(
            &cfg,
            &ReportInputs {
                certificate: certificate.clone(),
                controllers: controller.clone(),
                trace: trace.clone(),
                dims: dims.clone(),
            },
            out,
        ),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
