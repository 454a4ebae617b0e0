//! CSV outputs of a run: per-task metrics, communication ledgers,
//! accuracy matrices and the seed summary.

use std::path::{Path, PathBuf};

use fcl_core::experiment::SeedOutcome;
use fcl_core::federation::{CommLedger, Direction};
use fcl_core::metrics::{mean, sample_std};

use crate::error::{csv_err, io_err, FclError, Result};

pub const METRICS_HEADER: [&str; 5] = ["seed", "client", "task_index", "avg_accuracy", "forgetting"];
pub const LEDGER_HEADER: [&str; 9] = [
    "round",
    "task",
    "direction",
    "sender",
    "receiver",
    "kind",
    "nonzeros",
    "value_bytes",
    "wire_bytes",
];
pub const ACCURACY_HEADER: [&str; 4] = ["client", "after_task", "task", "accuracy"];
pub const SUMMARY_HEADER: [&str; 9] = [
    "method",
    "seeds",
    "avg_accuracy_mean",
    "avg_accuracy_std",
    "forgetting_mean",
    "forgetting_std",
    "c2s_value_bytes",
    "s2c_value_bytes",
    "total_wire_bytes",
];

pub fn metrics_path(dir: &Path, method: &str) -> PathBuf {
    dir.join(format!("{method}_metrics.csv"))
}

pub fn ledger_path(dir: &Path, method: &str, seed: u64) -> PathBuf {
    dir.join(format!("{method}_seed{seed}_ledger.csv"))
}

pub fn accuracy_path(dir: &Path, method: &str, seed: u64) -> PathBuf {
    dir.join(format!("{method}_seed{seed}_accuracy.csv"))
}

pub fn summary_path(dir: &Path, method: &str) -> PathBuf {
    dir.join(format!("{method}_summary.csv"))
}

/// One seed's final numbers, averaged over clients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeedStats {
    pub seed: u64,
    pub avg_accuracy: f64,
    /// `None` when clients learned a single task.
    pub forgetting: Option<f64>,
    pub c2s_value_bytes: u64,
    pub s2c_value_bytes: u64,
    pub wire_bytes: u64,
}

/// Mean and sample standard deviation over seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub method: String,
    pub seeds: usize,
    pub avg_accuracy_mean: f64,
    pub avg_accuracy_std: f64,
    pub forgetting_mean: Option<f64>,
    pub forgetting_std: Option<f64>,
    pub c2s_value_bytes: f64,
    pub s2c_value_bytes: f64,
    pub total_wire_bytes: f64,
}

impl Summary {
    pub fn from_seeds(method: &str, stats: &[SeedStats]) -> Self {
        let acc: Vec<f64> = stats.iter().map(|s| s.avg_accuracy).collect();
        let fgt: Option<Vec<f64>> = stats.iter().map(|s| s.forgetting).collect();
        let avg = |f: fn(&SeedStats) -> u64| mean(&stats.iter().map(|s| f(s) as f64).collect::<Vec<_>>());
        Self {
            method: method.to_string(),
            seeds: stats.len(),
            avg_accuracy_mean: mean(&acc),
            avg_accuracy_std: sample_std(&acc),
            forgetting_mean: fgt.as_deref().map(mean),
            forgetting_std: fgt.as_deref().map(sample_std),
            c2s_value_bytes: avg(|s| s.c2s_value_bytes),
            s2c_value_bytes: avg(|s| s.s2c_value_bytes),
            total_wire_bytes: avg(|s| s.wire_bytes),
        }
    }

    fn record(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        vec![
            self.method.clone(),
            self.seeds.to_string(),
            self.avg_accuracy_mean.to_string(),
            self.avg_accuracy_std.to_string(),
            opt(self.forgetting_mean),
            opt(self.forgetting_std),
            self.c2s_value_bytes.to_string(),
            self.s2c_value_bytes.to_string(),
            self.total_wire_bytes.to_string(),
        ]
    }

    /// One human-readable line.
    pub fn line(&self) -> String {
        let fgt = match (self.forgetting_mean, self.forgetting_std) {
            (Some(m), Some(s)) => format!("{m:.4} ± {s:.4}"),
            _ => "n/a".to_string(),
        };
        format!(
            "{:<12} seeds={} acc={:.4} ± {:.4} forgetting={} c2s={:.0}B s2c={:.0}B",
            self.method,
            self.seeds,
            self.avg_accuracy_mean,
            self.avg_accuracy_std,
            fgt,
            self.c2s_value_bytes,
            self.s2c_value_bytes
        )
    }
}

pub fn seed_stats(outcome: &SeedOutcome) -> Result<SeedStats> {
    let forgetting = if outcome.accuracy.iter().all(|m| m.tasks() >= 2) {
        Some(outcome.final_forgetting()?)
    } else {
        None
    };
    Ok(SeedStats {
        seed: outcome.seed,
        avg_accuracy: outcome.final_avg_accuracy()?,
        forgetting,
        c2s_value_bytes: outcome.ledger.totals(Direction::ClientToServer).value_bytes,
        s2c_value_bytes: outcome.ledger.totals(Direction::ServerToClient).value_bytes,
        wire_bytes: outcome.ledger.totals_where(|_| true).wire_bytes,
    })
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(csv_err(path))
}

fn finish(mut w: csv::Writer<std::fs::File>, path: &Path) -> Result<()> {
    w.flush().map_err(io_err(path))
}

pub fn write_metrics(path: &Path, outcomes: &[SeedOutcome]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(METRICS_HEADER).map_err(csv_err(path))?;
    for o in outcomes {
        for (client, m) in o.accuracy.iter().enumerate() {
            for t in 1..=m.tasks() {
                let fgt = if t >= 2 { m.forgetting(t)?.to_string() } else { String::new() };
                w.write_record([
                    o.seed.to_string(),
                    client.to_string(),
                    t.to_string(),
                    m.avg_accuracy(t)?.to_string(),
                    fgt,
                ])
                .map_err(csv_err(path))?;
            }
        }
    }
    finish(w, path)
}

pub fn write_ledger(path: &Path, ledger: &CommLedger) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(LEDGER_HEADER).map_err(csv_err(path))?;
    for r in ledger.records() {
        w.write_record([
            r.round.to_string(),
            r.task.to_string(),
            r.direction.name().to_string(),
            r.sender.to_string(),
            r.receiver.to_string(),
            r.kind.name().to_string(),
            r.nonzeros.to_string(),
            r.value_bytes.to_string(),
            r.wire_bytes.to_string(),
        ])
        .map_err(csv_err(path))?;
    }
    finish(w, path)
}

pub fn write_accuracy(path: &Path, outcome: &SeedOutcome) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(ACCURACY_HEADER).map_err(csv_err(path))?;
    for (client, m) in outcome.accuracy.iter().enumerate() {
        for (after, row) in m.rows().iter().enumerate() {
            for (task, a) in row.iter().enumerate() {
                w.write_record([client.to_string(), (after + 1).to_string(), (task + 1).to_string(), a.to_string()])
                    .map_err(csv_err(path))?;
            }
        }
    }
    finish(w, path)
}

pub fn write_summaries(path: &Path, summaries: &[Summary]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(SUMMARY_HEADER).map_err(csv_err(path))?;
    for s in summaries {
        w.write_record(s.record()).map_err(csv_err(path))?;
    }
    finish(w, path)
}

/// Writes every per-run file into `dir` and returns the summary.
pub fn write_run(dir: &Path, method: &str, outcomes: &[SeedOutcome]) -> Result<Summary> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_metrics(&metrics_path(dir, method), outcomes)?;
    let mut stats = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        write_ledger(&ledger_path(dir, method, o.seed), &o.ledger)?;
        write_accuracy(&accuracy_path(dir, method, o.seed), o)?;
        stats.push(seed_stats(o)?);
    }
    if stats.is_empty() {
        return Err(FclError::NoData {
            path: metrics_path(dir, method),
        });
    }
    let summary = Summary::from_seeds(method, &stats);
    write_summaries(&summary_path(dir, method), std::slice::from_ref(&summary))?;
    Ok(summary)
}
