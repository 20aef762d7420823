//! Experiment driver for `biaslab`: resolves flat key-value configs, runs the
//! named experiments and writes CSV series with a JSON manifest.

pub mod config;
pub mod error;
pub mod experiments;
pub mod output;

use std::path::PathBuf;

pub use config::{Experiment, ExperimentConfig};
pub use error::CliError;
pub use experiments::{execute, Plan};
pub use output::{ResultRecord, RunOutput, Series};

/// Environment variable holding the default worker count.
pub const WORKERS_ENV: &str = "BIASLAB_WORKERS";

/// Everything `run` needs from the command line.
#[derive(Debug, Clone, Default)]
pub struct RunArgs {
    pub experiment: String,
    pub config: Option<PathBuf>,
    pub set: Vec<String>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

/// Resolves the config (defaults, file, `--set`, `--seed`, `--out`), runs the
/// experiment and writes its outputs.
pub fn run(args: &RunArgs) -> Result<Vec<ResultRecord>, CliError> {
    let cfg = resolve(args)?;
    let plan = execute(&cfg)?;
    plan.write(&cfg.out)
}

pub fn resolve(args: &RunArgs) -> Result<ExperimentConfig, CliError> {
    let mut problems = Vec::new();
    let experiment = args.experiment.parse::<Experiment>().map_err(|e| CliError::Config(vec![e]))?;
    let text = match &args.config {
        Some(path) => match std::fs::read_to_string(path) {
            Ok(t) => Some(t),
            Err(e) => {
                problems.push(format!("config: cannot read {}: {e}", path.display()));
                None
            }
        },
        None => None,
    };
    let mut overrides = Vec::new();
    for s in &args.set {
        match config::parse_assignment(s) {
            Some(kv) => overrides.push(kv),
            None => problems.push(format!("--set: expected key=value, got `{s}`")),
        }
    }
    if let Some(seed) = args.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    if let Some(out) = &args.out {
        overrides.push(("out".into(), out.display().to_string()));
    }
    match ExperimentConfig::resolve(experiment, text.as_deref(), &overrides) {
        Ok(cfg) if problems.is_empty() => Ok(cfg),
        Ok(_) => Err(CliError::Config(problems)),
        Err(e) => {
            problems.extend(e);
            Err(CliError::Config(problems))
        }
    }
}

/// Worker count from [`WORKERS_ENV`], if set.
pub fn workers_from_env() -> Result<Option<usize>, CliError> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Config(vec![format!("{WORKERS_ENV}: expected a positive integer, got `{v}`")])),
        },
        Err(_) => Ok(None),
    }
}
