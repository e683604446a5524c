//! `vfp-lab`: runs the particle, grid and closed-form experiments from a JSON
//! configuration and writes CSV/JSON results.
//!
//! Exit codes: 0 success (possibly with warnings), 1 configuration error,
//! 2 numerical failure, 3 envelope violation inside the guaranteed regime.

mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vfp_core::Error;

use config::ExperimentConfig;
use run::Solver;

#[derive(Parser)]
#[command(name = "vfp-lab", version, about = "Vlasov-Fokker-Planck experiment runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output path prefix (overrides `output` in the configuration).
    #[arg(long, global = true)]
    out: Option<String>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Synchronous-coupling contraction of the particle system.
    Contraction,
    /// Entropy, free energies, Fisher information and W2 along the grid flow.
    Lyapunov,
    /// Twisted Fisher information decay against its envelopes.
    Fisher,
    /// Stationary state by fixed-point iteration.
    Stationary,
    /// Closed-form Gaussian values for the quadratic kernel.
    Oracle,
    /// Plain particle or grid simulation with moment output.
    Simulate {
        #[arg(long, value_enum, default_value = "particles")]
        solver: Solver,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Contraction => "contraction",
            Command::Lyapunov => "lyapunov",
            Command::Fisher => "fisher",
            Command::Stationary => "stationary",
            Command::Oracle => "oracle",
            Command::Simulate { .. } => "simulate",
        }
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Divergence { .. } | Error::NegativeDensity { .. } | Error::NonConvergence { .. } | Error::Support { .. } => 2,
        _ => 1,
    }
}

fn load(cli: &Cli) -> vfp_core::Result<ExperimentConfig> {
    let path = cli.config.as_ref().ok_or_else(|| Error::Config("--config PATH is required".into()))?;
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut cfg = ExperimentConfig::from_json(&text)?;
    if let Some(seed) = cli.seed {
        cfg.override_seed(seed);
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match load(&cli) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let validated = match cfg.validate() {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let prefix = cli.out.clone().or_else(|| cfg.output.clone()).unwrap_or_else(|| run::default_prefix(cli.command.name()));
    let result = match cli.command {
        Command::Contraction => run::contraction(&cfg, &validated, &prefix),
        Command::Lyapunov => run::lyapunov(&cfg, &validated, &prefix),
        Command::Fisher => run::fisher(&cfg, &validated, &prefix),
        Command::Stationary => run::stationary(&cfg, &validated, &prefix),
        Command::Oracle => run::oracle(&cfg, &validated, &prefix),
        Command::Simulate { solver } => run::simulate(&cfg, &validated, &prefix, solver),
    };
    match result {
        Ok(outcome) => {
            for w in &outcome.warnings {
                eprintln!("warning: {w}");
            }
            for f in &outcome.files {
                println!("{}", f.display());
            }
            if outcome.envelope_violation {
                eprintln!("error: envelope violated inside the guaranteed regime");
                ExitCode::from(3)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
