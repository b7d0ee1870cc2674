use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fpf_core::harness::{self, ExperimentConfig};
use fpf_core::Error;

/// Feedback particle filter experiments.
#[derive(Parser)]
#[command(name = "fpf", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment: truth, filters, metrics and output files.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the configured seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the configured output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run only the static gain benchmark section of a config.
    GainBench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a config against the schema without running it.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::Config { .. } => EXIT_CONFIG,
        _ => EXIT_NUMERICAL,
    }
}

fn load(path: &Path) -> Result<ExperimentConfig, ExitCode> {
    harness::load_config(path).map_err(|e| {
        eprintln!("config error: {e}");
        ExitCode::from(EXIT_CONFIG)
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Validate { config } => match load(&config) {
            Ok(_) => {
                println!("{}: ok", config.display());
                return ExitCode::SUCCESS;
            }
            Err(code) => return code,
        },
        Command::Run { config, seed, out } => {
            let mut cfg = match load(&config) {
                Ok(c) => c,
                Err(code) => return code,
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(o) = out {
                cfg.output_dir = o;
            }
            harness::run_experiment(&cfg).map(|_| cfg.output_dir)
        }
        Command::GainBench { config, out } => {
            let mut cfg = match load(&config) {
                Ok(c) => c,
                Err(code) => return code,
            };
            if cfg.gain_bench.is_none() {
                eprintln!("config error: {}: no [gain_bench] section", config.display());
                return ExitCode::from(EXIT_CONFIG);
            }
            if let Some(o) = out {
                cfg.output_dir = o;
            }
            cfg.filters.clear();
            harness::run_experiment(&cfg).map(|_| cfg.output_dir)
        }
    };
    match outcome {
        Ok(dir) => {
            println!("wrote {}", dir.join("metrics.json").display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
