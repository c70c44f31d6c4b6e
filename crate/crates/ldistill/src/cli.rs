//! Command-line surface. `main` only forwards `std::env::args_os` here.

use std::ffi::OsString;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Parser, Subcommand};

use crate::config::{parse_config, RunConfig};
use crate::error::RunError;
use crate::gradcheck::{gradcheck, DEFAULT_STEP};
use crate::protocol::BackendClient;
use crate::report::build_report;
use crate::runner::run;

#[derive(Debug, Parser)]
#[command(name = "ldistill", version, about = "Score-distillation training of toy 3D-aware generators")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a generator and write a run directory.
    Run {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compare injected gradients against central differences.
    Gradcheck {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(short = 'n', long, default_value_t = 100)]
        probes: usize,
        /// CSV destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_STEP)]
        step: f64,
    },
    /// Curves, turntable renders and a summary for a finished run.
    Report {
        run_dir: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Handshake with a score backend and print its shape.
    Ping {
        addr: String,
        #[arg(long, default_value_t = 5000)]
        timeout_ms: u64,
    },
}

fn load(path: &Path) -> Result<RunConfig, RunError> {
    Ok(parse_config(path)?)
}

fn say(line: serde_json::Value) {
    println!("{line}");
}

pub fn execute(cmd: Command) -> Result<(), RunError> {
    match cmd {
        Command::Run { config, out, seed } => {
            let mut cfg = load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let report = run(&cfg, &out)?;
            say(serde_json::json!({
                "status": report.status,
                "iterations": report.iterations_completed,
                "phase_counts": report.phase_counts,
                "checkpoint": out.join(&report.checkpoint),
                "digest": report.digest,
            }));
        }
        Command::Gradcheck { config, probes, out, step } => {
            let cfg = load(&config)?;
            let report = gradcheck(&cfg, probes, step)?;
            match &out {
                Some(path) => {
                    let file = File::create(path).map_err(RunError::io(path))?;
                    report.write_csv(file).map_err(|e| RunError::format(path, e))?;
                }
                None => report
                    .write_csv(std::io::stdout().lock())
                    .map_err(|e| RunError::format("<stdout>", e))?,
            }
            if !report.passed() {
                return Err(RunError::Gradcheck {
                    max_rel_err: report.max_rel_err(),
                    threshold: report.threshold,
                });
            }
            if out.is_some() {
                say(serde_json::json!({
                    "probes": report.probes.len(),
                    "max_rel_err": report.max_rel_err(),
                    "passed": true,
                }));
            }
        }
        Command::Report { run_dir, out } => {
            let r = build_report(&run_dir, &out)?;
            print!("{}", r.summary_text);
            std::io::stdout().flush().map_err(RunError::io("<stdout>"))?;
        }
        Command::Ping { addr, timeout_ms } => {
            let client = BackendClient::connect(&addr, Duration::from_millis(timeout_ms))?;
            say(serde_json::json!({
                "ok": true,
                "returns": client.returns(),
                "shape": client.shape().as_array(),
            }));
        }
    }
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit status. On
/// failure exactly one JSON line goes to stderr.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let line = serde_json::json!({
                "error": "usage",
                "exit_code": 2,
                "message": e.render().to_string().trim_end(),
            });
            eprintln!("{line}");
            return 2;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.to_json_line());
            e.exit_code()
        }
    }
}
