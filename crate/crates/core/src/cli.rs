// SPDX-License-Identifier: Apache-2.0

//! Command-line entry point.
//!
//! Exit codes: 0 success, 1 usage, 2 rejected scenario, 3 trap budget
//! exceeded.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use crate::config::{load_scenario_path, ConfigError};
use crate::harness::{emit_report, run_scenario, ReportFormat};
use crate::mhp::{build_midpoint_program, build_node_program, NodePorts};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_TRAPS: i32 = 3;

/// Bin width of the shipped midpoint program document.
pub const DEFAULT_BIN_WIDTH_NS: u64 = 300_000;

#[derive(Debug, Parser)]
#[command(name = "qlink", version, about = "Heralded quantum link simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a scenario and write its metrics report.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// Defaults to the scenario's `run.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Override `run.max_cycles`.
        #[arg(long)]
        cycles: Option<u32>,
        /// Override `run.stop_after_successes`.
        #[arg(long)]
        stop_after_successes: Option<u64>,
        /// Override `run.trap_budget`.
        #[arg(long)]
        trap_budget: Option<u64>,
        /// Report destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "json")]
        format: ReportFormat,
    },
    /// Check a scenario without running it.
    Validate {
        #[arg(long)]
        scenario: PathBuf,
    },
    /// Print a device program document.
    Program {
        #[arg(value_enum)]
        role: Role,
        /// Take ports and bin width from this scenario.
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// Node whose ports to use.
        #[arg(long, default_value_t = 0)]
        node: u16,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Role {
    Node,
    Midpoint,
}

fn config_failure(err: &mut dyn Write, e: &ConfigError) -> i32 {
    let _ = writeln!(err, "error: {e}");
    EXIT_CONFIG
}

/// Run the CLI with explicit arguments (including the program name) and
/// output streams. Returns the exit code.
pub fn main_with_args<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(err, "{text}");
                EXIT_USAGE
            } else {
                let _ = write!(out, "{text}");
                EXIT_OK
            };
        }
    };

    match cli.command {
        Command::Validate { scenario } => match load_scenario_path(&scenario) {
            Ok(s) => {
                let _ = writeln!(
                    out,
                    "ok: {}",
                    if s.name.is_empty() {
                        "scenario"
                    } else {
                        &s.name
                    }
                );
                EXIT_OK
            }
            Err(e) => config_failure(err, &e),
        },
        Command::Run {
            scenario,
            seed,
            cycles,
            stop_after_successes,
            trap_budget,
            out: dest,
            format,
        } => {
            let mut s = match load_scenario_path(&scenario) {
                Ok(s) => s,
                Err(e) => return config_failure(err, &e),
            };
            let Some(seed) = seed.or(s.run.seed) else {
                let _ = writeln!(
                    err,
                    "error: no --seed given and the scenario sets no run.seed"
                );
                return EXIT_USAGE;
            };
            if cycles.is_some() {
                s.run.max_cycles = cycles;
            }
            if stop_after_successes.is_some() {
                s.run.stop_after_successes = stop_after_successes;
            }
            let budget = trap_budget.unwrap_or(s.run.trap_budget);
            let report = match run_scenario(&s, seed) {
                Ok(r) => r,
                Err(e) => return config_failure(err, &e),
            };
            let bytes = emit_report(&report, format);
            let written = match &dest {
                Some(path) => std::fs::write(path, &bytes),
                None => out.write_all(&bytes),
            };
            if let Err(e) = written {
                let _ = writeln!(err, "error: cannot write report: {e}");
                return EXIT_USAGE;
            }
            if report.traps > budget {
                let _ = writeln!(
                    err,
                    "error: {} runtime traps exceed the budget of {budget}",
                    report.traps
                );
                return EXIT_TRAPS;
            }
            EXIT_OK
        }
        Command::Program {
            role,
            scenario,
            node,
        } => {
            let (ports, width) = match scenario {
                Some(path) => match load_scenario_path(&path) {
                    Ok(s) if (node as usize) < s.nodes.len() => {
                        (s.node_ports(node), s.bin_width_ns())
                    }
                    Ok(_) => {
                        let _ = writeln!(err, "error: no node {node}");
                        return EXIT_USAGE;
                    }
                    Err(e) => return config_failure(err, &e),
                },
                None => (NodePorts::single(1, 1), DEFAULT_BIN_WIDTH_NS),
            };
            let program = match role {
                Role::Node => build_node_program(&ports),
                Role::Midpoint => build_midpoint_program(width),
            };
            let _ = writeln!(out, "{}", program.to_json());
            EXIT_OK
        }
    }
}
