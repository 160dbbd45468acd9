//! `ivble`: run scenarios and sweeps from the command line.
//!
//! Exit status: 0 success, 1 bad input (usage, scenario, unknown sweep key),
//! 2 infeasible schedule, 3 runtime invariant violation.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ivble_core::output::{summary, write_artifacts};
use ivble_core::runner::{run_scenario, RunError, RunOptions};
use ivble_core::scenario::{scenario_source, Scenario, TEMPLATES};
use ivble_core::sim::SimTime;
use ivble_core::sweep::{parse_values, sweep, SweepError};

#[derive(Parser)]
#[command(name = "ivble", version, about = "Discrete-event simulator for BLE intra-vehicular sensor networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario file or built-in template.
    Run {
        scenario: String,
        #[arg(long)]
        seed: Option<u64>,
        /// Simulated duration in seconds, replacing the scenario's own.
        #[arg(long)]
        until: Option<f64>,
        #[arg(long, default_value = "results")]
        out: PathBuf,
        /// Also write the per-frame packet trace.
        #[arg(long)]
        trace: bool,
    },
    /// Run a scenario once per (value, seed) and print the combined CSV.
    Sweep {
        scenario: String,
        #[arg(long)]
        param: String,
        /// Comma list, or an integer range `a..b` / `a..=b`.
        #[arg(long, allow_hyphen_values = true)]
        values: String,
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List or print the built-in templates.
    Templates {
        /// Print this template's source.
        name: Option<String>,
    },
}

fn fail(code: u8, msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(code)
}

fn run_error_code(e: &RunError) -> u8 {
    match e {
        RunError::Infeasible(_) => 2,
        RunError::Invariant { .. } => 3,
        RunError::Setup(_) => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match cli.command {
        Command::Run { scenario, seed, until, out, trace } => {
            let (text, dir) = match scenario_source(&scenario) {
                Ok(s) => s,
                Err(e) => return fail(1, e),
            };
            let sc = match Scenario::from_toml_str(&text, dir.as_deref()) {
                Ok(s) => s,
                Err(e) => return fail(1, e),
            };
            let until = match until {
                Some(u) if !(u > 0.0 && u.is_finite()) => return fail(1, format!("--until must be positive, got {u}")),
                Some(u) => Some(SimTime::from_secs_f64(u)),
                None => None,
            };
            let result = match run_scenario(&sc, &RunOptions { seed, until, trace }) {
                Ok(r) => r,
                Err(e) => return fail(run_error_code(&e), e),
            };
            if let Err(e) = write_artifacts(&result, &sc, &out) {
                return fail(1, format!("cannot write {}: {e}", out.display()));
            }
            print!("{}", summary(&result, &sc));
            println!("artifacts written to {}", out.display());
            ExitCode::SUCCESS
        }
        Command::Sweep { scenario, param, values, seeds, out } => {
            let (text, dir) = match scenario_source(&scenario) {
                Ok(s) => s,
                Err(e) => return fail(1, e),
            };
            let values = match parse_values(&values) {
                Ok(v) => v,
                Err(e) => return fail(1, e),
            };
            let csv = match sweep(&text, dir.as_deref(), &param, &values, seeds) {
                Ok(c) => c,
                Err(e) => {
                    let code = match &e {
                        SweepError::Run { error, .. } => run_error_code(error),
                        _ => 1,
                    };
                    return fail(code, e);
                }
            };
            match out {
                Some(path) => {
                    if let Err(e) = std::fs::write(&path, csv) {
                        return fail(1, format!("cannot write {}: {e}", path.display()));
                    }
                }
                None => print!("{csv}"),
            }
            ExitCode::SUCCESS
        }
        Command::Templates { name: None } => {
            for (name, _) in TEMPLATES {
                println!("{name}");
            }
            ExitCode::SUCCESS
        }
        Command::Templates { name: Some(name) } => match TEMPLATES.iter().find(|(n, _)| *n == name) {
            Some((_, body)) => {
                print!("{body}");
                ExitCode::SUCCESS
            }
            None => fail(1, format!("no template named {name:?}")),
        },
    }
}
