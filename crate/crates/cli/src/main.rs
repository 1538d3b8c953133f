//! `matchcal`: bias, variance and caliper calibration reports for matched
//! regression studies.

mod commands;
mod config;
mod error;
mod report;
mod study;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::{CliError, EXIT_USAGE};

#[derive(Parser)]
#[command(name = "matchcal", version, about = "Omitted-variable bias and caliper calibration for matched regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration; omitted fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for simulation commands (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for Monte-Carlo work (overrides the config).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Per-term balance and omitted-bias table before and after matching.
    Diagnose,
    /// Normalized MSE over the caliper and R_o² grids.
    Calibrate,
    /// Monte-Carlo power of matched vs random subsamples per caliper.
    Power,
    /// Closed-form TE bias and variance against Monte-Carlo moments.
    Verify,
    /// Matched pairs and the retained dataset.
    Match,
    /// Writes the data with a simulated outcome column.
    Simulate,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Diagnose => "diagnose",
            Command::Calibrate => "calibrate",
            Command::Power => "power",
            Command::Verify => "verify",
            Command::Match => "match",
            Command::Simulate => "simulate",
        }
    }
}

fn run(cli: Cli) -> Result<Vec<String>, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = Some(seed);
    }
    if let Some(out) = cli.out {
        cfg.out = out;
    }
    if let Some(threads) = cli.threads {
        cfg.threads = Some(threads);
    }
    let cfg = cfg.finalize()?;
    if let Some(threads) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| CliError::config(format!("cannot start thread pool: {e}")))?;
    }
    let files = match cli.command {
        Command::Diagnose => commands::diagnose(&cfg),
        Command::Calibrate => commands::calibrate(&cfg),
        Command::Power => commands::power(&cfg),
        Command::Verify => commands::verify(&cfg),
        Command::Match => commands::match_cmd(&cfg),
        Command::Simulate => commands::simulate(&cfg),
    }?;
    Ok(files.iter().map(|f| cfg.out.join(f).display().to_string()).collect())
}

fn fail(e: &CliError) -> ExitCode {
    let line = serde_json::json!({ "error": e });
    let _ = writeln!(std::io::stderr().lock(), "{line}");
    ExitCode::from(e.exit_code as u8)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail(&CliError::new("usage", e.to_string().trim_end(), EXIT_USAGE)),
    };
    let command = cli.command.name();
    match run(cli) {
        Ok(files) => {
            let line = serde_json::json!({ "status": "ok", "command": command, "files": files });
            println!("{line}");
            ExitCode::SUCCESS
        }
        Err(e) => fail(&e),
    }
}
