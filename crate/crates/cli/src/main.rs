use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rpn_cli::{Algorithm, ConfigError, ExperimentConfig, Overrides};

/// Residual pooling federated learning experiments.
///
/// Log verbosity follows RUST_LOG (default: info).
#[derive(Parser)]
#[command(name = "rpn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write metrics.csv, summary.json and friends.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `algorithm` in the config.
        #[arg(long, value_enum)]
        algorithm: Option<Algorithm>,
        /// Overrides `seed` in the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `out` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare two finished runs.
    Compare { a: PathBuf, b: PathBuf },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, algorithm, seed, out } => {
            ExperimentConfig::load(&config).map_err(anyhow::Error::from).and_then(|mut cfg| {
                cfg.apply(&Overrides { algorithm, seed, out });
                cfg.validate()?;
                rpn_cli::run(&cfg).map(|_| ())
            })
        }
        Command::Compare { a, b } => rpn_cli::compare(&a, &b).map(|c| println!("{c}")),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
