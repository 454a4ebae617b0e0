//! `fcl` command-line entry point.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fcl::{compare, config, output, FclError, Overrides};
use fcl_core::objective::Method;

#[derive(Parser)]
#[command(name = "fcl", version, about = "Federated continual learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment config and write its CSV outputs.
    Run {
        config: PathBuf,
        /// Seed to run; repeat for several. Replaces the config's list.
        #[arg(long = "seed")]
        seeds: Vec<u64>,
        /// Output directory; takes precedence over the config.
        #[arg(long, env = "FCL_OUT_DIR")]
        out: Option<PathBuf>,
        /// Method to run instead of the configured one.
        #[arg(long, value_parser = parse_method)]
        method: Option<Method>,
        /// Seeds run concurrently.
        #[arg(long, default_value_t = default_threads())]
        threads: usize,
    },
    /// Summarize `<method>_metrics.csv` files side by side.
    Compare {
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
        /// Directory for comparison.csv; defaults to that of the first file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the generated task streams of one seed to a binary file.
    Streams {
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_method(s: &str) -> Result<Method, String> {
    Method::parse(s).ok_or_else(|| format!("unknown method `{s}`"))
}

fn default_threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn execute(cli: Cli) -> Result<(), FclError> {
    match cli.command {
        Command::Run {
            config: path,
            seeds,
            out,
            method,
            threads,
        } => {
            let mut cfg = config::load(&path)?;
            cfg.apply(&Overrides {
                seeds: (!seeds.is_empty()).then_some(seeds),
                out_dir: out,
                method,
            });
            let summary = fcl::run(&cfg, threads)?;
            println!("{}", summary.line());
        }
        Command::Compare { metrics, out } => {
            let summaries = compare::compare(&metrics)?;
            let dir = out
                .or_else(|| metrics[0].parent().map(PathBuf::from))
                .unwrap_or_default();
            std::fs::create_dir_all(&dir).map_err(|source| FclError::Io {
                path: dir.clone(),
                source,
            })?;
            output::write_summaries(&dir.join("comparison.csv"), &summaries)?;
            for s in &summaries {
                println!("{}", s.line());
            }
        }
        Command::Streams { config: path, seed, out } => {
            let cfg = config::load(&path)?;
            let n = fcl::dump_streams(&cfg, seed, &out)?;
            println!("wrote {n} bytes to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
