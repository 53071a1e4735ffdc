//! Thin command-line front end over the library.
//!
//! Exit codes: 0 success, 1 invalid config or input, 2 runtime failure.

use clap::{Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use unlearn_lab::config;
use unlearn_lab::experiment::{self, ExperimentError, OUT_ENV};

#[derive(Parser)]
#[command(name = "unlearn-lab", version, about = "Continual unlearning laboratory")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run every configured (algorithm × repeat) combination and write
    /// result artifacts.
    Run {
        /// Experiment config (TOML).
        config: PathBuf,
    },
    /// Statically validate a config without running anything.
    Validate {
        /// Experiment config (TOML).
        config: PathBuf,
    },
    /// Re-emit plot-data tables from a stored aggregate result file.
    EmitPlots {
        /// An `aggregate.json` produced by `run`.
        log: PathBuf,
    },
}

fn main() -> ExitCode {
    match Cli::parse().cmd {
        Cmd::Run { config } => run(&config),
        Cmd::Validate { config } => validate(&config),
        Cmd::EmitPlots { log } => emit_plots(&log),
    }
}

fn load(path: &Path) -> Result<config::ExperimentConfig, ExitCode> {
    config::load(path).map_err(|e| {
        eprintln!("error: {e}");
        ExitCode::from(1)
    })
}

fn run(path: &Path) -> ExitCode {
    let cfg = match load(path) {
        Ok(cfg) => cfg,
        Err(code) => return code,
    };
    let diags = config::validate(&cfg);
    if !diags.is_empty() {
        for d in &diags {
            eprintln!("error: {d}");
        }
        return ExitCode::from(1);
    }
    let root = std::env::var_os(OUT_ENV).map(PathBuf::from);
    let out_dir = experiment::resolve_out_dir(&cfg.experiment.output_dir, root.as_deref());
    match experiment::run_experiment(&cfg, &out_dir) {
        Ok(outcome) => {
            println!("wrote {}", outcome.out_dir.display());
            let failed = outcome.n_failed();
            if failed > 0 {
                for f in &outcome.aggregate.failed {
                    eprintln!("error: run {}_s{} failed: {}", f.label, f.repeat, f.error);
                }
                eprintln!("error: {failed} run(s) failed; partial results preserved");
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e @ ExperimentError::InvalidConfig(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn validate(path: &Path) -> ExitCode {
    let cfg = match load(path) {
        Ok(cfg) => cfg,
        Err(code) => return code,
    };
    let diags = config::validate(&cfg);
    if diags.is_empty() {
        println!("ok");
        ExitCode::SUCCESS
    } else {
        for d in &diags {
            eprintln!("error: {d}");
        }
        ExitCode::from(1)
    }
}

fn emit_plots(log: &Path) -> ExitCode {
    let aggregate = match experiment::load_aggregate(log) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let dir = log.parent().unwrap_or_else(|| Path::new(".")).join("plots");
    match experiment::emit_plot_data(&aggregate, &dir) {
        Ok(()) => {
            println!("wrote {}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
