//! `qiv`: simulate, diagnose, and estimate quasi-IV models from the shell.
//!
//! Every command prints a JSON report on stdout (command echo, config hash,
//! results, warnings, timing) and, given an output directory, writes it and
//! any artifacts there atomically. Failures print `{"error": ...}` on stderr
//! and exit nonzero; identification failures are results and exit 0.

mod commands;
mod config;
mod failure;
mod input;
mod montecarlo;
mod warnings;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use config::{Command, RunConfig};
use failure::Failure;

#[derive(Parser)]
#[command(
    name = "qiv",
    version,
    about = "Quasi-instrumental-variable identification and estimation"
)]
struct Cli {
    /// Directory for reports and artifacts
    #[arg(long, global = true, env = "QIV_OUTPUT_DIR")]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    action: Action,
}

// parsed once per process, so the variant size gap is harmless
#[allow(clippy::large_enum_variant)]
#[derive(Subcommand)]
enum Action {
    #[command(flatten)]
    Command(Command),
    /// Run a command described by a JSON config file
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Names of the bundled designs
    List,
}

#[derive(Serialize)]
struct Timing {
    elapsed_ms: f64,
}

#[derive(Serialize)]
struct Report<'a> {
    command: &'a str,
    config: &'a RunConfig,
    config_hash: String,
    results: Value,
    warnings: Vec<String>,
    timing: Timing,
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

fn resolve(cli: Cli) -> Result<Option<RunConfig>, Failure> {
    match cli.action {
        Action::Command(command) => Ok(Some(RunConfig {
            command,
            output_dir: cli.out_dir,
        })),
        Action::Run { config } => {
            let text = std::fs::read_to_string(&config)
                .map_err(|e| Failure::io(format!("{}: {e}", config.display())))?;
            let mut cfg = RunConfig::from_json(&text)?;
            if cfg.output_dir.is_none() {
                cfg.output_dir = cli.out_dir;
            }
            Ok(Some(cfg))
        }
        Action::List => {
            print_stdout(&qiv_core::dgp::bundled::NAMES.join("\n"))?;
            Ok(None)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let Some(cfg) = resolve(cli)? else {
        return Ok(());
    };
    cfg.validate()?;
    let start = Instant::now();
    let results = commands::execute(&cfg)?;
    let report = Report {
        command: cfg.command.name(),
        config: &cfg,
        config_hash: cfg.hash(),
        results,
        warnings: warnings::drain(),
        timing: Timing {
            elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
        },
    };
    let text = serde_json::to_string_pretty(&report).map_err(|e| Failure::io(e.to_string()))?;
    if let Some(path) = cfg.output_path(&format!("{}.json", cfg.command.name())) {
        input::write_atomic(&path, text.as_bytes())?;
    }
    print_stdout(&text)
}

/// A closed pipe downstream (`qiv ... | head`) is not an error.
fn print_stdout(text: &str) -> Result<(), Failure> {
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn main() -> ExitCode {
    warnings::install();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let f = Failure::schema(e.render().to_string());
            eprintln!("{}", f.to_json());
            return ExitCode::from(f.exit_code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.to_json());
            ExitCode::from(f.exit_code)
        }
    }
}
