//! `kflow <kind> [--config FILE] [--seed N] [--out PREFIX] [--override key=value ...]`
//!
//! Exit status: 0 when every assertion holds, 1 on a failed assertion or run error,
//! 2 on a usage or configuration error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use kernel_flows::experiment::{load_config_value, parse_override, run_experiment, ExperimentConfig, ExperimentKind};

#[derive(Parser, Debug)]
#[command(name = "kflow", about = "Run a kernel-flow experiment and write CSV/JSON artifacts")]
struct Cli {
    /// One of: supervised, ssl, semi, muon, coupled, noise, risk, adiabatic, phase-sweep,
    /// align-track, truncation-curve.
    kind: ExperimentKind,
    /// JSON config merged over the preset for `kind`.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Artifact path prefix.
    #[arg(long)]
    out: Option<String>,
    /// `key=value` applied after the config file; dotted keys reach nested fields.
    #[arg(long = "override", value_parser = parse_override)]
    overrides: Vec<(String, String)>,
}

fn usage_error(msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("kflow: {msg}");
    ExitCode::from(2)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let file = match cli.config.as_ref().map(load_config_value).transpose() {
        Ok(v) => v,
        Err(e) => return usage_error(e),
    };
    let mut overrides = cli.overrides;
    if let Some(seed) = cli.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    if let Some(out) = cli.out {
        overrides.push(("out".into(), serde_json::Value::String(out).to_string()));
    }
    let cfg = match ExperimentConfig::resolve(cli.kind, file.as_ref(), &overrides) {
        Ok(c) => c,
        Err(e) => return usage_error(e),
    };
    let report = match run_experiment(&cfg) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("kflow: {e}");
            return ExitCode::from(1);
        }
    };
    for a in &report.assertions {
        println!("{} {} = {:.6e} ({:?} {:.6e})", if a.passed { "PASS" } else { "FAIL" }, a.name, a.value, a.relation, a.tolerance);
    }
    if let Some(e) = &report.error {
        eprintln!("kflow: {e}");
    }
    for p in &report.artifacts {
        println!("wrote {p}");
    }
    ExitCode::from(report.exit_code() as u8)
}
