use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;
use walksearch_cli::{cmd_simulate, cmd_sweep_xi, cmd_trajectory, cmd_unconditional, parse_config, parse_xi_list, Channels, CliError};

/// Feedback-assisted quantum search on cycle graphs.
///
/// Set WALKSEARCH_WORKERS to override the number of worker threads.
#[derive(Parser)]
#[command(name = "walksearch", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Trajectory ensemble: averaged fidelity, couplings and summary.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// One trajectory with its fidelity, position and couplings.
    Trajectory {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        index: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Populations of the unconditional master equation.
    Unconditional {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        channels: Channels,
        #[arg(long)]
        out: PathBuf,
    },
    /// Threshold and effective times for a list of bounding factors.
    SweepXi {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated bounding factors, e.g. 1,5,50.
        #[arg(long)]
        xi: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate { config, out } => {
            let cfg = parse_config(&config)?;
            let b = cmd_simulate(&cfg, &out)?;
            info!("wrote {}", b.summary_json.display());
        }
        Command::Trajectory { config, index, out } => {
            let cfg = parse_config(&config)?;
            let p = cmd_trajectory(&cfg, index, &out)?;
            info!("wrote {}", p.display());
        }
        Command::Unconditional { config, channels, out } => {
            let cfg = parse_config(&config)?;
            let p = cmd_unconditional(&cfg, channels, &out)?;
            info!("wrote {}", p.display());
        }
        Command::SweepXi { config, xi, out } => {
            let cfg = parse_config(&config)?;
            let xi = parse_xi_list(&xi)?;
            let p = cmd_sweep_xi(&cfg, &xi, &out)?;
            info!("wrote {}", p.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
