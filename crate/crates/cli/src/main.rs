//! `idg`: generate motif datasets, train extractor/predictor models, and run
//! the diagnostic probes. Every run writes `manifest.json` into `--out`.

mod args;
mod commands;
mod config;

use std::path::Path;
use std::process::ExitCode;

use chrono::{SecondsFormat, Utc};
use clap::error::ErrorKind;
use clap::Parser;
use serde::Serialize;

use crate::args::Cli;

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a [String],
    subcommand: &'static str,
    seed: u64,
    config: serde_json::Value,
    started_at: String,
    finished_at: String,
    status: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    artifacts: Vec<String>,
    summary: serde_json::Value,
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

fn write_manifest(out: &Path, m: &Manifest) -> anyhow::Result<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("manifest.json"), serde_json::to_string_pretty(m)? + "\n")?;
    Ok(())
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let expanded = match config::expand(&argv) {
        Ok(a) => a,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(1);
        }
    };
    let cli = match Cli::try_parse_from(&expanded) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };

    let started_at = now();
    let common = cli.cmd.common().clone();
    let result = commands::run(&cli.cmd);
    let (status, error, outcome) = match result {
        Ok(o) => ("ok", None, o),
        Err(e) => ("error", Some(format!("{e:#}")), commands::Outcome::default()),
    };
    let manifest = Manifest {
        tool: "idg",
        version: env!("CARGO_PKG_VERSION"),
        command: &argv,
        subcommand: cli.cmd.name(),
        seed: common.seed,
        config: cli.cmd.resolved(),
        started_at,
        finished_at: now(),
        status,
        error: error.clone(),
        artifacts: outcome.artifacts,
        summary: outcome.summary,
    };
    if let Err(e) = write_manifest(&common.out, &manifest) {
        eprintln!("error: could not write manifest: {e:#}");
        return ExitCode::from(2);
    }
    match error {
        None => ExitCode::SUCCESS,
        Some(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
