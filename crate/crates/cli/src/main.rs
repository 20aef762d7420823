use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use biaslab_cli::config::KEYS;
use biaslab_cli::{run, workers_from_env, CliError, Experiment, RunArgs};

#[derive(Parser)]
#[command(name = "biaslab", version, about = "Run SGD resampling/reweighting experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a named experiment and write its CSV series and manifest.
    Run {
        experiment: String,
        /// Flat `key = value` config file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override one key; repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List experiments and config keys.
    List,
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
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::List => {
            println!("experiments:");
            for e in Experiment::ALL {
                println!("  {:<16} {}", e.name(), e.summary());
            }
            println!("keys:");
            for (k, m) in KEYS {
                println!("  {k:<11} {m}");
            }
            Ok(())
        }
        Command::Run { experiment, config, set, seed, out } => {
            if let Some(n) = workers_from_env()? {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global()
                    .expect("global pool is configured once");
            }
            let records = run(&RunArgs { experiment, config, set, seed, out })?;
            for r in records {
                let files: Vec<_> = r.series.iter().map(|s| s.file.as_str()).collect();
                println!("{} -> {} ({})", r.experiment, r.config["out"], files.join(", "));
            }
            Ok(())
        }
    }
}
