//! Host-side companion to `fcl-core`: configuration files, parallel seed
//! runs, CSV outputs, cross-method comparison and a binary stream dump.

pub mod compare;
pub mod config;
pub mod error;
pub mod output;
pub mod streamfile;

use std::path::{Path, PathBuf};

use fcl_core::experiment::{run_seed, ExperimentConfig, SeedOutcome};
use fcl_core::objective::Method;

pub use config::{ConfigError, RunConfig};
pub use error::{FclError, Result};
pub use output::Summary;

/// Command-line overrides applied on top of a loaded config.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seeds: Option<Vec<u64>>,
    pub out_dir: Option<PathBuf>,
    pub method: Option<Method>,
}

impl RunConfig {
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = &o.seeds {
            self.seeds = s.clone();
        }
        if let Some(d) = &o.out_dir {
            self.out_dir = d.clone();
        }
        if let Some(m) = o.method {
            self.experiment.objective.method = m;
        }
    }
}

/// Runs every seed, at most `threads` at a time, and returns outcomes in
/// seed order. Results do not depend on `threads`.
pub fn run_seeds(cfg: &ExperimentConfig, seeds: &[u64], threads: usize) -> Result<Vec<SeedOutcome>> {
    let mut out = Vec::with_capacity(seeds.len());
    for chunk in seeds.chunks(threads.max(1)) {
        let results: Vec<fcl_core::Result<SeedOutcome>> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk.iter().map(|&seed| s.spawn(move || run_seed(cfg, seed))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("seed thread panicked"))
                .collect()
        });
        for r in results {
            out.push(r?);
        }
    }
    Ok(out)
}

/// Runs a config and writes its outputs under `cfg.out_dir`.
pub fn run(cfg: &RunConfig, threads: usize) -> Result<Summary> {
    for (field, value) in &cfg.defaults {
        log::info!("{field} not set, using default {value}");
    }
    let method = cfg.experiment.method().name();
    log::info!(
        "running {method} over seeds {:?} into {}",
        cfg.seeds,
        cfg.out_dir.display()
    );
    let outcomes = run_seeds(&cfg.experiment, &cfg.seeds, threads)?;
    output::write_run(&cfg.out_dir, method, &outcomes)
}

/// Generates the streams of one seed and writes them to `path`.
pub fn dump_streams(cfg: &RunConfig, seed: u64, path: &Path) -> Result<usize> {
    let streams = cfg.experiment.streams(seed)?;
    let bytes = streamfile::encode(&streams)?;
    std::fs::write(path, &bytes).map_err(error::io_err(path))?;
    Ok(bytes.len())
}
