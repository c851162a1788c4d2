mod commands;
mod config;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;
use spincool::calibration::CalibrationTargets;
use spincool::GainSearch;

use crate::config::{parse_override, EngineChoice};
use crate::error::CliError;

#[derive(Parser)]
#[command(name = "spincool", version, about = "Feedback cooling of a collective atomic spin")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set probe.n_photons=1e7`.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    set: Vec<String>,
    #[arg(long, value_enum)]
    engine: Option<EngineChoice>,
    #[arg(long)]
    n_trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(short, long, env = config::OUTPUT_DIR_ENV)]
    output_dir: Option<PathBuf>,
    /// Worker threads for Monte Carlo runs (default: available parallelism).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run a schedule and write summary.json, record_covariance.csv and trials.csv.
    Simulate(Common),
    /// Evaluate the total variance over a grid of last-round gains.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = -2.0, allow_hyphen_values = true)]
        g_min: f64,
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        g_max: f64,
        #[arg(long, default_value_t = 0.125)]
        g_step: f64,
    },
    /// Choose per-round gains greedily.
    Optimize {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1)]
        rounds: usize,
        /// Gains of leading rounds held fixed, comma separated.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        fixed: Vec<f64>,
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
    },
    /// Write the record covariance only.
    Covariance(Common),
    /// Fit alpha0 and feedback_noise_coeff to the observed reductions.
    Calibrate(Common),
}

fn load(common: &Common) -> Result<config::RunConfig, CliError> {
    let doc = config::read_document(common.config.as_deref())?;
    let mut overrides = common
        .set
        .iter()
        .map(|s| parse_override(s))
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(e) = common.engine {
        overrides.push(("engine".into(), serde_json::to_value(e).expect("engine serializes")));
    }
    if let Some(n) = common.n_trials {
        overrides.push(("n_trials".into(), Value::from(n)));
    }
    if let Some(s) = common.seed {
        overrides.push(("master_seed".into(), Value::from(s)));
    }
    if let Some(d) = &common.output_dir {
        overrides.push(("output_dir".into(), Value::from(d.to_string_lossy().into_owned())));
    }
    if let Some(t) = common.threads {
        overrides.push(("threads".into(), Value::from(t)));
    }
    config::resolve(doc, &overrides)
}

fn run(cli: Cli) -> Result<output::Writer, CliError> {
    match cli.command {
        Command::Simulate(c) => commands::simulate(&load(&c)?),
        Command::Covariance(c) => commands::covariance(&load(&c)?),
        Command::Sweep {
            common,
            g_min,
            g_max,
            g_step,
        } => commands::sweep(&load(&common)?, commands::SweepArgs { g_min, g_max, g_step }),
        Command::Optimize {
            common,
            rounds,
            fixed,
            tol,
        } => {
            let search = GainSearch {
                tol,
                ..GainSearch::default()
            };
            commands::optimize(&load(&common)?, rounds, &fixed, search)
        }
        Command::Calibrate(c) => commands::calibrate_cmd(&load(&c)?, CalibrationTargets::default()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(w) => {
            for p in w.written() {
                log::debug!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            let msg = serde_json::json!({ "error": { "kind": e.kind(), "message": e.message() } });
            eprintln!("{msg}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
