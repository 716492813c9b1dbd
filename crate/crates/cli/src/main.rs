use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pdftc_cli::run::{run_scenario, run_sweep};

#[derive(Parser)]
#[command(name = "pdftc", version, about = "Fault-tolerant primal-dual controller scenarios")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario file, or every scenario in a directory with --sweep.
    Run {
        /// Scenario JSON file.
        #[arg(required_unless_present = "sweep")]
        config: Option<PathBuf>,
        /// Directory of scenario files to run in parallel.
        #[arg(long, conflicts_with = "config")]
        sweep: Option<PathBuf>,
        /// Seed of the certificate sampler.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Run { config, sweep, seed } => match (config, sweep) {
            (_, Some(dir)) => run_sweep(&dir, seed),
            (Some(path), None) => run_scenario(&path, seed),
            (None, None) => unreachable!("clap requires one of them"),
        },
    };
    ExitCode::from(code as u8)
}
