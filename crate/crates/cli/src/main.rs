//! `nbrw`: theory overlays, Monte Carlo sweeps and N-CREM beam runs.
//!
//! ```text
//! nbrw sweep --config sweep.json --sweep.alpha 0.5,1,2,4 --replicas 20
//! ```
//!
//! Exit codes: 0 success, 2 configuration or precondition error, 3 resource
//! abort (partial output written), 1 anything else.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use serde_json::Value;

use commands::Failure;

#[derive(Parser, Debug)]
#[command(name = "nbrw", version, about = "Branching random walks with selection: theory, simulation and beam search")]
struct Cli {
    /// theory | psi | simulate | crem | sweep
    #[arg(value_parser = ["theory", "psi", "simulate", "crem", "sweep"])]
    mode: String,
    /// JSON experiment config, or a manifest.json from an earlier run.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Wall-clock budget; unfinished rows are flagged and the exit code is 3.
    #[arg(long)]
    max_seconds: Option<f64>,
    /// Worker threads for replicas.
    #[arg(long)]
    threads: Option<usize>,
    /// Config overrides as `--dotted.key value`, e.g. `--sweep.alpha 0.5,1,2`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

fn resolve(cli: &Cli) -> Result<config::ExperimentConfig, config::ConfigError> {
    let mut doc = config::load_document(cli.config.as_deref())?;
    config::set_path(&mut doc, "mode", Value::String(cli.mode.clone()))?;
    if let Some(out) = &cli.out {
        config::set_path(&mut doc, "out", Value::String(out.display().to_string()))?;
    }
    if let Some(s) = cli.max_seconds {
        config::set_path(&mut doc, "max_seconds", serde_json::json!(s))?;
    }
    if let Some(t) = cli.threads {
        config::set_path(&mut doc, "threads", serde_json::json!(t))?;
    }
    config::apply_overrides(&mut doc, &cli.overrides)?;
    config::resolve(doc)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let cfg = match resolve(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("nbrw: {e}");
            return ExitCode::from(2);
        }
    };
    log::info!("running {} into {}", cfg.mode.name(), cfg.out.display());
    match commands::execute(&cfg) {
        Ok(r) if r.incomplete == 0 => ExitCode::SUCCESS,
        Ok(r) => {
            eprintln!("nbrw: {} row(s) did not finish; partial output in {}", r.incomplete, cfg.out.display());
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("nbrw: {e}");
            let code = match &e {
                Failure::Config(_) => 2,
                Failure::Core(nbrw::Error::Resource(_)) => 3,
                Failure::Core(nbrw::Error::Numerical(_)) | Failure::Io(_) => 1,
                Failure::Core(_) => 2,
            };
            ExitCode::from(code)
        }
    }
}
