//! `hetseg` command-line front end.
//!
//! Every command prints one JSON report on stdout:
//! `{command, arguments, wall_time_ms, result, warnings}`. With `--quiet`
//! only `result` is printed. Diagnostics go to stderr.
//!
//! Exit codes: 0 success, 1 usage error, 2 validation failure, 3 I/O or
//! format error, 4 numeric failure.

mod commands;

use std::process::ExitCode;
use std::time::Instant;

use clap::error::ErrorKind;
use clap::Parser;
use serde_json::{json, Value};

use hetseg_core::Error;

use commands::Cli;

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_VALIDATION: u8 = 2;
pub const EXIT_FORMAT: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;

/// What a command hands back to the dispatcher.
pub struct Outcome {
    pub result: Value,
    pub warnings: Vec<String>,
    /// Non-zero when the command ran but its check failed.
    pub status: u8,
}

impl Outcome {
    pub fn ok(result: Value) -> Self {
        Outcome {
            result,
            warnings: Vec::new(),
            status: 0,
        }
    }

    pub fn with_warnings(mut self, warnings: Vec<String>) -> Self {
        self.warnings.extend(warnings);
        self
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Io(_) | Error::Json(_) | Error::Format(_) => EXIT_FORMAT,
        Error::Partition { .. } | Error::InvalidInput(_) => EXIT_VALIDATION,
        Error::Numeric(_) => EXIT_NUMERIC,
    }
}

fn configure_threads() {
    let Ok(raw) = std::env::var("HETSEG_THREADS") else {
        return;
    };
    match raw.trim().parse::<usize>() {
        Ok(0) => {}
        Ok(n) => {
            if let Err(e) = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
            {
                eprintln!("hetseg: cannot size thread pool: {e}");
            }
        }
        Err(_) => eprintln!("hetseg: ignoring HETSEG_THREADS={raw:?}"),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_USAGE),
            };
        }
    };
    configure_threads();

    let started = Instant::now();
    let name = cli.command.name();
    let outcome = match commands::run(&cli.command) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("hetseg {name}: {e}");
            return ExitCode::from(exit_code(&e));
        }
    };
    for w in &outcome.warnings {
        eprintln!("hetseg {name}: warning: {w}");
    }

    let doc = if cli.quiet {
        outcome.result
    } else {
        json!({
            "command": name,
            "arguments": std::env::args().skip(1).collect::<Vec<_>>(),
            "wall_time_ms": started.elapsed().as_secs_f64() * 1e3,
            "result": outcome.result,
            "warnings": outcome.warnings,
        })
    };
    match serde_json::to_string_pretty(&doc) {
        Ok(text) => println!("{text}"),
        Err(e) => {
            eprintln!("hetseg {name}: {e}");
            return ExitCode::from(EXIT_FORMAT);
        }
    }
    ExitCode::from(outcome.status)
}
