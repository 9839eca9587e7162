use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;
mod error;

use config::RunArgs;
use error::CliResult;

#[derive(Debug, Parser)]
#[command(name = "mnagt", version, about = "Multi-neighborhood attention graph transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train on a TU-format dataset over every seed and report mean ± std test accuracy.
    Train(RunArgs),
    /// Train all four kernel aggregators under the same seeds and print a comparison table.
    Ablate(RunArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Run the gradient, oracle-equivalence and invariant suites.
    Verify {
        /// Randomized cases per oracle and invariant check.
        #[arg(long, default_value_t = 50)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Print dataset statistics.
    Inspect {
        #[command(flatten)]
        run: RunArgs,
        /// Also print the parameter count of the configured model.
        #[arg(long)]
        params: bool,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train(args) => commands::train(&args.resolve()?),
        Command::Ablate(args) => commands::ablate(&args.resolve()?),
        Command::Gradcheck { inject_fault, json } => commands::gradcheck(inject_fault.as_deref(), json.as_deref()),
        Command::Verify { trials, seed, inject_fault, json } => {
            commands::verify(trials, seed, inject_fault.as_deref(), json.as_deref())
        }
        Command::Inspect { run, params } => commands::inspect(&run.resolve()?, params),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
