use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mcf_codim::cli::{cmd_compare, cmd_converge, cmd_run, cmd_verify, CliError, ExitStatus};
use mcf_codim::config::RunConfig;
use mcf_codim::verify::VerifyOptions;

/// Mean curvature flow of closed curves in R^n.
#[derive(Parser)]
#[command(name = "mcf", version)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured method(s) and write CSV output.
    Run { config: PathBuf },
    /// Convergence study over the configured levels.
    Converge { config: PathBuf },
    /// Coupled scheme and baseline side by side.
    Compare { config: PathBuf },
    /// Self-checks of the discretization.
    Verify {
        /// Mutation check: flip the sign of one nonlinear term.
        #[arg(long, hide = true)]
        inject_f1_sign_flip: bool,
    },
}

fn load(path: &Path) -> Result<RunConfig, CliError> {
    Ok(RunConfig::from_path(path)?)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Args::parse();
    let result: Result<ExitStatus, CliError> = match args.command {
        Command::Run { config } => load(&config).and_then(|c| cmd_run(&c)).map(|r| {
            print!("{}", r.summary());
            r.status
        }),
        Command::Compare { config } => load(&config).and_then(|c| cmd_compare(&c)).map(|r| {
            print!("{}", r.summary());
            r.status
        }),
        Command::Converge { config } => load(&config).and_then(|c| cmd_converge(&c)).map(|r| {
            print!("{}", r.summary());
            r.status
        }),
        Command::Verify { inject_f1_sign_flip } => {
            let options =
                if inject_f1_sign_flip { VerifyOptions::with_f1_sign_flip() } else { VerifyOptions::default() };
            let (reports, status) = cmd_verify(&options);
            for r in &reports {
                print!("{r}");
            }
            Ok(status)
        }
    };
    let status = result.unwrap_or_else(|e| {
        eprintln!("error: {e}");
        e.exit_status()
    });
    ExitCode::from(status.code() as u8)
}
