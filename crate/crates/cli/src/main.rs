use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use seqtape_cli::commands::{self, CliError, CommandOutput, Route, SimMode};

/// Factors tape states into sequential circuits and runs them.
#[derive(Parser)]
#[command(name = "seqtape", version, about)]
struct Cli {
    /// Suppress the human report on stdout; files are still written.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum RouteArg {
    Decouple,
    Naive,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Enumerate,
    Sample,
}

#[derive(Subcommand)]
enum Command {
    /// Compile a tape state into a sequential circuit.
    Compile {
        /// Input state document.
        input: PathBuf,
        /// Output circuit document.
        #[arg(long)]
        out: PathBuf,
        /// Compilation route.
        #[arg(long, value_enum, default_value = "decouple")]
        route: RouteArg,
        /// Pad every interior bond to this width before compiling.
        #[arg(long)]
        pad: Option<usize>,
    },
    /// Run a verification suite against an artifact.
    Check {
        /// Artifact to verify.
        artifact: PathBuf,
        /// Suite name: canonical or decoupling.
        #[arg(long)]
        suite: String,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a machine program and record its output distribution.
    Simulate {
        /// Program document.
        program: PathBuf,
        /// Output distribution or counts document.
        #[arg(long)]
        out: PathBuf,
        /// Exact enumeration or seeded sampling.
        #[arg(long, value_enum, default_value = "enumerate")]
        mode: ModeArg,
        /// Shots for sampling mode.
        #[arg(long, default_value_t = 1024)]
        shots: usize,
        /// Seed for sampling mode.
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Factor a nonnegative matrix into k nonnegative components.
    Nmf {
        /// Matrix document.
        matrix: PathBuf,
        /// Output factorization document.
        #[arg(long)]
        out: PathBuf,
        /// Number of components.
        #[arg(long)]
        k: usize,
        /// Maximum update rounds.
        #[arg(long, default_value_t = 2000)]
        max_iter: usize,
        /// Stop once the divergence improves by less than this.
        #[arg(long, default_value_t = 1e-12)]
        tol: f64,
        /// Seed for the initial factors.
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

fn dispatch(command: Command) -> Result<CommandOutput, CliError> {
    match command {
        Command::Compile { input, out, route, pad } => {
            let route = match route {
                RouteArg::Decouple => Route::Decouple,
                RouteArg::Naive => Route::Naive,
            };
            commands::cmd_compile(&input, &out, route, pad)
        }
        Command::Check { artifact, suite, out } => {
            commands::cmd_check(&artifact, &suite, out.as_deref())
        }
        Command::Simulate { program, out, mode, shots, seed } => {
            let mode = match mode {
                ModeArg::Enumerate => SimMode::Enumerate,
                ModeArg::Sample => SimMode::Sample,
            };
            commands::cmd_simulate(&program, &out, mode, shots, seed)
        }
        Command::Nmf { matrix, out, k, max_iter, tol, seed } => {
            commands::cmd_nmf(&matrix, &out, k, max_iter, tol, seed)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(output) => {
            if !cli.quiet {
                for line in &output.lines {
                    println!("{line}");
                }
            }
            if let Some(payload) = &output.stdout_payload {
                print!("{payload}");
            }
            ExitCode::from(u8::try_from(output.code).unwrap_or(1))
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(u8::try_from(e.code).unwrap_or(1))
        }
    }
}
