use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use feinn_cli::{run, RunConfig};

#[derive(Parser)]
#[command(name = "feinn", version, about = "Adaptive FEINN and FEM experiments for 2D Poisson problems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a config file.
    Run {
        config: PathBuf,
        /// Output directory, overriding `out`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Single seed, overriding `seeds`.
        #[arg(long)]
        seed: Option<u64>,
        /// `key=value`, applied after the file; may be repeated.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

fn load(config: &Path, out: Option<PathBuf>, seed: Option<u64>, overrides: &[String]) -> Result<RunConfig, feinn_cli::ConfigError> {
    let mut cfg = RunConfig::from_file(config)?;
    for kv in overrides {
        cfg.apply_override(kv)?;
    }
    if let Some(out) = out {
        cfg.out = out;
    }
    if let Some(seed) = seed {
        cfg.seeds = vec![seed];
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let Command::Run { config, out, seed, overrides } = Cli::parse().command;
    let cfg = match load(&config, out, seed, &overrides) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match run(&cfg) {
        Ok(summary) => {
            for f in &summary.files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
