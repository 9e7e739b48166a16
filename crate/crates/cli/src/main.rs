use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mimic_cli::run::{run_file, RunOptions};
use mimic_core::coeffs::BreakMode;

#[derive(Parser)]
#[command(name = "mimic", version, about = "Degenerate diffusion experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Worker threads (default: all cores).
        #[arg(long)]
        threads: Option<usize>,
        /// Replace the generator by one without drift or diffusion.
        #[arg(long, value_name = "drift|diffusion")]
        break_generator: Option<BreakMode>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let Command::Run { config, threads, break_generator } = cli.command;
    if let Some(n) = threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let opts = RunOptions { break_mode: break_generator, threads };
    match run_file(&config, &opts) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("checks failed; see report.json");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
