//! Rebuilds method summaries from written metrics and ledger files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use fcl_core::federation::Direction;
use fcl_core::metrics::mean;

use crate::error::{csv_err, FclError, Result};
use crate::output::{ledger_path, SeedStats, Summary, LEDGER_HEADER, METRICS_HEADER};

fn schema(path: &Path, message: String) -> FclError {
    FclError::Schema {
        path: path.to_path_buf(),
        message,
    }
}

fn reader(path: &Path, header: &[&str]) -> Result<csv::Reader<std::fs::File>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let got = r.headers().map_err(csv_err(path))?.clone();
    if got.is_empty() {
        return Err(FclError::NoData { path: path.into() });
    }
    if got.iter().ne(header.iter().copied()) {
        return Err(schema(
            path,
            format!("expected columns {}, found {}", header.join(","), got.iter().collect::<Vec<_>>().join(",")),
        ));
    }
    Ok(r)
}

fn field<T: std::str::FromStr>(path: &Path, line: u64, rec: &csv::StringRecord, i: usize, name: &str) -> Result<T> {
    rec.get(i)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| schema(path, format!("line {line}: bad {name}")))
}

/// Method name encoded in a `<method>_metrics.csv` path.
pub fn method_of(path: &Path) -> Result<String> {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
    stem.strip_suffix("_metrics")
        .filter(|m| !m.is_empty())
        .map(str::to_string)
        .ok_or_else(|| schema(path, "file name must look like <method>_metrics.csv".into()))
}

struct Final {
    task: usize,
    acc: f64,
    fgt: Option<f64>,
}

/// Final accuracy and forgetting per seed, each a mean over clients.
fn read_metrics(path: &Path) -> Result<BTreeMap<u64, (f64, Option<f64>)>> {
    let mut r = reader(path, &METRICS_HEADER)?;
    let mut last: BTreeMap<(u64, u32), Final> = BTreeMap::new();
    for (n, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err(path))?;
        let line = n as u64 + 2;
        let seed: u64 = field(path, line, &rec, 0, "seed")?;
        let client: u32 = field(path, line, &rec, 1, "client")?;
        let task: usize = field(path, line, &rec, 2, "task_index")?;
        let acc: f64 = field(path, line, &rec, 3, "avg_accuracy")?;
        let fgt = match rec.get(4) {
            Some("") => None,
            _ => Some(field::<f64>(path, line, &rec, 4, "forgetting")?),
        };
        if task == 0 || (task >= 2) != fgt.is_some() {
            return Err(schema(path, format!("line {line}: forgetting must be blank exactly at task 1")));
        }
        let entry = last.entry((seed, client)).or_insert(Final { task: 0, acc, fgt });
        if task > entry.task {
            *entry = Final { task, acc, fgt };
        }
    }
    if last.is_empty() {
        return Err(FclError::NoData { path: path.into() });
    }
    let mut per_seed: BTreeMap<u64, Vec<&Final>> = BTreeMap::new();
    for ((seed, _), f) in &last {
        per_seed.entry(*seed).or_default().push(f);
    }
    Ok(per_seed
        .into_iter()
        .map(|(seed, finals)| {
            let acc = mean(&finals.iter().map(|f| f.acc).collect::<Vec<_>>());
            let fgt: Option<Vec<f64>> = finals.iter().map(|f| f.fgt).collect();
            (seed, (acc, fgt.as_deref().map(mean)))
        })
        .collect())
}

/// `(c2s value bytes, s2c value bytes, wire bytes)` summed over a ledger file.
pub fn read_ledger_totals(path: &Path) -> Result<(u64, u64, u64)> {
    let mut r = reader(path, &LEDGER_HEADER)?;
    let (mut c2s, mut s2c, mut wire) = (0u64, 0u64, 0u64);
    for (n, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err(path))?;
        let line = n as u64 + 2;
        let dir = rec
            .get(2)
            .and_then(Direction::parse)
            .ok_or_else(|| schema(path, format!("line {line}: bad direction")))?;
        let value: u64 = field(path, line, &rec, 7, "value_bytes")?;
        wire += field::<u64>(path, line, &rec, 8, "wire_bytes")?;
        match dir {
            Direction::ClientToServer => c2s += value,
            Direction::ServerToClient => s2c += value,
        }
    }
    Ok((c2s, s2c, wire))
}

/// Summary of one method from its metrics file and the sibling ledgers.
pub fn summarize(metrics: &Path) -> Result<Summary> {
    let method = method_of(metrics)?;
    let dir = metrics.parent().map(Path::to_path_buf).unwrap_or_default();
    let seeds = read_metrics(metrics)?;
    let mut stats = Vec::with_capacity(seeds.len());
    for (seed, (acc, fgt)) in seeds {
        let (c2s, s2c, wire) = read_ledger_totals(&ledger_path(&dir, &method, seed))?;
        stats.push(SeedStats {
            seed,
            avg_accuracy: acc,
            forgetting: fgt,
            c2s_value_bytes: c2s,
            s2c_value_bytes: s2c,
            wire_bytes: wire,
        });
    }
    Ok(Summary::from_seeds(&method, &stats))
}

/// Summaries for several metrics files, in argument order.
pub fn compare(paths: &[PathBuf]) -> Result<Vec<Summary>> {
    paths.iter().map(|p| summarize(p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_from_file_name() {
        assert_eq!(method_of(Path::new("out/fedprox_metrics.csv")).unwrap(), "fedprox");
        assert!(method_of(Path::new("out/fedprox.csv")).is_err());
        assert!(method_of(Path::new("_metrics.csv")).is_err());
    }
}
