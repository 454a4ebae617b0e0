//! Experiment configuration files.
//!
//! Flat `key = value` lines grouped under `[section]` headers; `#` and `;`
//! start comments. Every key is optional and falls back to a default, and
//! every default taken is reported so callers can log it.
//!
//! ```text
//! [experiment]  method, seeds, out_dir, schedule (sync|async), budgets
//! [federation]  clients, fraction, rounds_per_task, kappa_base, kappa_adaptive,
//!               kb_sample, kb_schedule (task_end|round_one), base_upload
//! [stream]      kind (overlapped|noniid), tasks_per_client, classes_per_task,
//!               global_tasks, feature_dim, sigma, train_per_class,
//!               valid_per_class, test_per_class, pool_classes
//! [model]       hidden
//! [train]       epochs_per_round, batch_size, lr, lr_factor, lr_patience,
//!               lr_floor, fisher_samples
//! [objective]   l1, drift, prox, ewc
//! ```
//!
//! `budgets` lists rounds per task for each client, clients separated by
//! `;` and tasks by `,`. Real values also accept a quotient such as `1e-3/3`.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use fcl_core::data::StreamParams;
use fcl_core::experiment::{ExperimentConfig, Schedule, StreamKind};
use fcl_core::federation::{BaseUpload, FederationConfig, KbSchedule, TrainConfig};
use fcl_core::objective::{Method, ObjectiveConfig};
use ini::Ini;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("cannot read config {path}: {message}")]
    Io { path: String, message: String },
    #[error("config syntax error: {0}")]
    Syntax(String),
    #[error("unknown section [{0}]")]
    UnknownSection(String),
    #[error("{0}: unknown key")]
    UnknownKey(String),
    #[error("{0}: given more than once")]
    Duplicate(String),
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
}

/// A parsed configuration and the defaults it relied on.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub experiment: ExperimentConfig,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    /// `(section.key, value)` for every key left at its default.
    pub defaults: Vec<(String, String)>,
}

const SECTIONS: [&str; 6] = ["experiment", "federation", "stream", "model", "train", "objective"];

struct Reader<'a> {
    ini: &'a Ini,
    defaults: Vec<(String, String)>,
}

impl Reader<'_> {
    fn value<T>(
        &mut self,
        section: &str,
        key: &str,
        default: &str,
        parse: impl Fn(&str) -> Result<T, String>,
    ) -> Result<T, ConfigError> {
        let field = format!("{section}.{key}");
        let given = self.ini.section(Some(section)).and_then(|p| p.get(key));
        let raw = match given {
            Some(v) => v.trim(),
            None => {
                self.defaults.push((field.clone(), default.to_string()));
                default
            }
        };
        parse(raw).map_err(|message| ConfigError::Invalid { field, message })
    }
}

fn real(s: &str) -> Result<f64, String> {
    let v = match s.split_once('/') {
        Some((a, b)) => {
            let a: f64 = a.trim().parse().map_err(|_| format!("`{s}` is not a number"))?;
            let b: f64 = b.trim().parse().map_err(|_| format!("`{s}` is not a number"))?;
            a / b
        }
        None => s.parse().map_err(|_| format!("`{s}` is not a number"))?,
    };
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("`{s}` is not finite"))
    }
}

fn positive_real(s: &str) -> Result<f64, String> {
    let v = real(s)?;
    if v > 0.0 {
        Ok(v)
    } else {
        Err(format!("must be positive, got {v}"))
    }
}

fn non_negative_real(s: &str) -> Result<f64, String> {
    let v = real(s)?;
    if v >= 0.0 {
        Ok(v)
    } else {
        Err(format!("must be non-negative, got {v}"))
    }
}

fn fraction(s: &str) -> Result<f64, String> {
    let v = real(s)?;
    if v > 0.0 && v <= 1.0 {
        Ok(v)
    } else {
        Err(format!("must be in (0, 1], got {v}"))
    }
}

fn count(s: &str) -> Result<usize, String> {
    s.parse().map_err(|_| format!("`{s}` is not a non-negative integer"))
}

fn positive_count(s: &str) -> Result<usize, String> {
    match count(s)? {
        0 => Err("must be at least 1".to_string()),
        n => Ok(n),
    }
}

fn optional_count(s: &str) -> Result<Option<usize>, String> {
    match s {
        "all" | "auto" => Ok(None),
        _ => count(s).map(Some),
    }
}

fn count_list(s: &str) -> Result<Vec<usize>, String> {
    s.split(',').map(|p| positive_count(p.trim())).collect()
}

fn seed_list(s: &str) -> Result<Vec<u64>, String> {
    let seeds: Vec<u64> = s
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| format!("`{p}` is not a seed")))
        .collect::<Result<_, _>>()?;
    let distinct: BTreeSet<u64> = seeds.iter().copied().collect();
    if distinct.len() != seeds.len() {
        return Err("seeds repeat".to_string());
    }
    Ok(seeds)
}

fn budgets(s: &str) -> Result<Vec<Vec<usize>>, String> {
    s.split(';').map(|row| count_list(row.trim())).collect()
}

fn method(s: &str) -> Result<Method, String> {
    Method::parse(s).ok_or_else(|| {
        let names: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
        format!("unknown method `{s}`, expected one of {}", names.join("|"))
    })
}

fn check_structure(ini: &Ini) -> Result<(), ConfigError> {
    for (section, props) in ini.iter() {
        let name = match section {
            None if props.is_empty() => continue,
            None => {
                let key = props.iter().next().map(|(k, _)| k).unwrap_or_default();
                return Err(ConfigError::UnknownKey(key.to_string()));
            }
            Some(s) => s,
        };
        if !SECTIONS.contains(&name) {
            return Err(ConfigError::UnknownSection(name.to_string()));
        }
        for (key, _) in props.iter() {
            let field = format!("{name}.{key}");
            if !known_key(name, key) {
                return Err(ConfigError::UnknownKey(field));
            }
            if props.get_all(key).count() > 1 {
                return Err(ConfigError::Duplicate(field));
            }
        }
    }
    let mut seen = BTreeSet::new();
    for (section, _) in ini.iter() {
        if let Some(s) = section {
            if !seen.insert(s) {
                return Err(ConfigError::Duplicate(format!("[{s}]")));
            }
        }
    }
    Ok(())
}

fn known_key(section: &str, key: &str) -> bool {
    let keys: &[&str] = match section {
        "experiment" => &["method", "seeds", "out_dir", "schedule", "budgets"],
        "federation" => &[
            "clients",
            "fraction",
            "rounds_per_task",
            "kappa_base",
            "kappa_adaptive",
            "kb_sample",
            "kb_schedule",
            "base_upload",
        ],
        "stream" => &[
            "kind",
            "tasks_per_client",
            "classes_per_task",
            "global_tasks",
            "feature_dim",
            "sigma",
            "train_per_class",
            "valid_per_class",
            "test_per_class",
            "pool_classes",
        ],
        "model" => &["hidden"],
        "train" => &[
            "epochs_per_round",
            "batch_size",
            "lr",
            "lr_factor",
            "lr_patience",
            "lr_floor",
            "fisher_samples",
        ],
        "objective" => &["l1", "drift", "prox", "ewc"],
        _ => &[],
    };
    keys.contains(&key)
}

/// Parses configuration text.
pub fn parse(text: &str) -> Result<RunConfig, ConfigError> {
    let ini = Ini::load_from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
    check_structure(&ini)?;
    let mut r = Reader {
        ini: &ini,
        defaults: Vec::new(),
    };

    let method = r.value("experiment", "method", "fedweit", method)?;
    let seeds = r.value("experiment", "seeds", "0,1,2", seed_list)?;
    let out_dir = r.value("experiment", "out_dir", "results", |s| Ok(PathBuf::from(s)))?;
    let asynchronous = r.value("experiment", "schedule", "sync", |s| match s {
        "sync" => Ok(false),
        "async" => Ok(true),
        _ => Err(format!("expected sync or async, got `{s}`")),
    })?;

    let clients = r.value("federation", "clients", "5", positive_count)?;
    let federation = FederationConfig {
        fraction: r.value("federation", "fraction", "1.0", fraction)?,
        rounds_per_task: r.value("federation", "rounds_per_task", "20", positive_count)?,
        kappa_base: r.value("federation", "kappa_base", "0.3", fraction)?,
        kappa_adaptive: r.value("federation", "kappa_adaptive", "0.03", fraction)?,
        kb_sample: r.value("federation", "kb_sample", "all", optional_count)?,
        kb_schedule: r.value("federation", "kb_schedule", "task_end", |s| match s {
            "task_end" => Ok(KbSchedule::TaskEnd),
            "round_one" => Ok(KbSchedule::RoundOneOfNextTask),
            _ => Err(format!("expected task_end or round_one, got `{s}`")),
        })?,
        base_upload: r.value("federation", "base_upload", "mask_selected", |s| match s {
            "mask_selected" => Ok(BaseUpload::MaskSelected),
            "masked_product" => Ok(BaseUpload::MaskedProduct),
            _ => Err(format!("expected mask_selected or masked_product, got `{s}`")),
        })?,
        seed: 0,
    };

    let kind = r.value("stream", "kind", "overlapped", |s| match s {
        "overlapped" | "noniid" => Ok(s.to_string()),
        _ => Err(format!("expected overlapped or noniid, got `{s}`")),
    })?;
    let tasks_per_client = r.value("stream", "tasks_per_client", "5", positive_count)?;
    let classes_per_task = r.value("stream", "classes_per_task", "5", |s| match count(s)? {
        n if n >= 2 => Ok(n),
        n => Err(format!("a task needs at least 2 classes, got {n}")),
    })?;
    let stream = if kind == "overlapped" {
        let global_tasks = r.value("stream", "global_tasks", "10", |s| {
            let n = positive_count(s)?;
            if n < tasks_per_client {
                Err(format!("{n} global tasks cannot supply {tasks_per_client} distinct tasks per client"))
            } else {
                Ok(n)
            }
        })?;
        StreamKind::Overlapped { global_tasks }
    } else {
        StreamKind::NonIid
    };
    let stream_params = StreamParams {
        feature_dim: r.value("stream", "feature_dim", "32", positive_count)?,
        sigma: r.value("stream", "sigma", "0.25", positive_real)?,
        train_per_class: r.value("stream", "train_per_class", "100", positive_count)?,
        valid_per_class: r.value("stream", "valid_per_class", "30", positive_count)?,
        test_per_class: r.value("stream", "test_per_class", "30", positive_count)?,
        pool_classes: r.value("stream", "pool_classes", "auto", optional_count)?,
    };

    let hidden = r.value("model", "hidden", "64", count_list)?;

    let train = TrainConfig {
        epochs_per_round: r.value("train", "epochs_per_round", "1", positive_count)?,
        batch_size: r.value("train", "batch_size", "100", positive_count)?,
        lr: r.value("train", "lr", "1e-3/3", positive_real)?,
        lr_factor: r.value("train", "lr_factor", "3", |s| match real(s)? {
            v if v > 1.0 => Ok(v),
            v => Err(format!("must exceed 1, got {v}")),
        })?,
        lr_patience: r.value("train", "lr_patience", "5", |s| {
            positive_count(s).and_then(|n| u32::try_from(n).map_err(|_| "too large".to_string()))
        })?,
        lr_floor: r.value("train", "lr_floor", "1e-7", positive_real)?,
        fisher_samples: r.value("train", "fisher_samples", "256", positive_count)?,
    };
    if train.lr_floor >= train.lr {
        return Err(ConfigError::Invalid {
            field: "train.lr_floor".into(),
            message: format!("must be below train.lr ({})", train.lr),
        });
    }

    let objective = ObjectiveConfig {
        method,
        l1: r.value("objective", "l1", "0.1", non_negative_real)?,
        drift: r.value("objective", "drift", "100", non_negative_real)?,
        prox: r.value("objective", "prox", "5e-3", non_negative_real)?,
        ewc: r.value("objective", "ewc", "1.0", non_negative_real)?,
    };

    let schedule = if asynchronous {
        let field = "experiment.budgets";
        let b = ini
            .section(Some("experiment"))
            .and_then(|p| p.get("budgets"))
            .ok_or_else(|| ConfigError::Invalid {
                field: field.into(),
                message: "required when schedule = async".into(),
            })?;
        let b = budgets(b.trim()).map_err(|message| ConfigError::Invalid {
            field: field.into(),
            message,
        })?;
        if b.len() != clients || b.iter().any(|row| row.len() != tasks_per_client) {
            return Err(ConfigError::Invalid {
                field: field.into(),
                message: format!("need {clients} rows of {tasks_per_client} round counts"),
            });
        }
        Schedule::Async { budgets: b }
    } else {
        Schedule::Sync
    };

    let experiment = ExperimentConfig {
        objective,
        clients,
        tasks_per_client,
        classes_per_task,
        stream,
        stream_params,
        hidden,
        federation,
        train,
        schedule,
    };
    experiment.validate().map_err(|e| ConfigError::Invalid {
        field: "experiment".into(),
        message: e.to_string(),
    })?;
    Ok(RunConfig {
        experiment,
        seeds,
        out_dir,
        defaults: r.defaults,
    })
}

/// Reads and parses a configuration file. The file is only read.
pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse(&text)
}
