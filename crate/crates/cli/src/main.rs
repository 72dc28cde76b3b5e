use std::path::{Path, PathBuf};
use std::process::ExitCode;

use admitlearn::error::Error;
use admitlearn::experiment::{compare_force_models, run_suite, weight_sweep, write_report, SuiteConfig};
use anyhow::Context;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "admitlearn", version, about = "Admittance gain learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Suite config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the episode count.
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Search offline gains in the simulated environment and write a gain file.
    Offline(Common),
    /// Compare all configured methods on the real environment.
    Run(Common),
    /// Run the proposed method for several weights.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0])]
        weights: Vec<f64>,
    },
    /// Compare force models used inside the online optimizer.
    Forces(Common),
    /// Aggregate `results.json` files into a markdown table.
    Report {
        /// Result directories.
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
}

fn load(common: &Common) -> anyhow::Result<SuiteConfig> {
    let mut cfg = SuiteConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.offline.seed = seed;
    }
    if let Some(n) = common.episodes {
        cfg.episodes = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn offline(common: &Common) -> anyhow::Result<()> {
    let mut cfg = load(common)?;
    cfg.gain_file = None;
    let gains = cfg.offline_gains()?;
    std::fs::create_dir_all(&common.out_dir).with_context(|| format!("creating {}", common.out_dir.display()))?;
    let path = common.out_dir.join(format!("{}_gains.json", cfg.task));
    cfg.gain_file_for(&gains).save(&path)?;
    println!("{}", path.display());
    Ok(())
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Offline(c) => offline(&c),
        Command::Run(c) => {
            let report = run_suite(&load(&c)?, Some(&c.out_dir))?;
            Ok(println!("{}", serde_json::to_string_pretty(&report.rows)?))
        }
        Command::Sweep { common, weights } => {
            let report = weight_sweep(&load(&common)?, &weights, Some(&common.out_dir))?;
            Ok(println!("{}", serde_json::to_string_pretty(&report.rows)?))
        }
        Command::Forces(c) => {
            let report = compare_force_models(&load(&c)?, Some(&c.out_dir))?;
            Ok(println!("{}", serde_json::to_string_pretty(&report)?))
        }
        Command::Report { dirs, out_dir } => {
            print!("{}", write_report(&dirs, Path::new(&out_dir))?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<Error>() {
                Some(Error::Config(_) | Error::Parse(_)) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
