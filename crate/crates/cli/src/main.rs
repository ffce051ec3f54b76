//! `segpref`: data generation, base training, timestep analysis, preference
//! tuning, evaluation and sweeps, all writing under one output directory.

mod artifacts;
mod commands;
mod config;
mod failure;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use segpref_core::evalsuite::sweep::SweepKind;

use crate::config::RunConfig;
use crate::failure::Failure;

#[derive(Debug, Parser)]
#[command(name = "segpref", version, about = "Timestep-segment preference optimization experiments")]
struct Cli {
    /// Config file: `dotted.key = value` lines, or a previous `run.json`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides `out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Preference-tuning variant (overrides `tpo.variant`).
    #[arg(long, global = true)]
    variant: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate training data, held-out data and evaluation conditions.
    GenData,
    /// Train the base velocity network.
    TrainBase,
    /// Per-step motion/fidelity curves of clean estimates and the step-skip probe.
    AnalyzeTimesteps,
    /// Generate the preference-pair dataset.
    BuildPrefs,
    /// Train the preference-tuned model for the configured variant.
    TrainTpo,
    /// Compare the tuned model against the base model.
    Eval,
    /// Train and evaluate every grid point over several seeds.
    Sweep {
        /// switch, rank, nfe or ablation
        kind: String,
        /// Comma-separated grid values (default: the kind's standard grid).
        #[arg(long)]
        grid: Option<String>,
    },
}

fn resolve(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(path) if !path.is_file() => return Err(Failure::missing(path, "a config file")),
        Some(path) => RunConfig::load(path).map_err(Failure::usage)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(v) = &cli.variant {
        cfg.tpo.variant = v.clone();
    }
    cfg.validate().map_err(Failure::usage)?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = resolve(&cli)?;
    let run = match &cli.command {
        Command::GenData => commands::gen_data(&cfg)?,
        Command::TrainBase => commands::train_base_cmd(&cfg)?,
        Command::AnalyzeTimesteps => commands::analyze_timesteps(&cfg)?,
        Command::BuildPrefs => commands::build_prefs(&cfg)?,
        Command::TrainTpo => commands::train_tpo_cmd(&cfg)?,
        Command::Eval => commands::eval(&cfg)?,
        Command::Sweep { kind, grid } => {
            let kind: SweepKind = kind.parse().map_err(Failure::usage)?;
            let grid = commands::resolve_grid(&mut cfg, kind, grid.as_deref())?;
            commands::sweep(&cfg, kind, &grid)?
        }
    };
    for rel in run.outputs() {
        println!("wrote {}", cfg.out_dir.join(rel).display());
    }
    run.finish(&cfg)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            let first = first.trim_start_matches("error: ");
            eprintln!("{}", Failure::usage(anyhow::anyhow!("{first}")).line());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.line());
            ExitCode::from(f.kind.code() as u8)
        }
    }
}
