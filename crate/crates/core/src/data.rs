//! Synthetic task streams.
//!
//! Each class is an isotropic Gaussian cluster around a random point on the
//! unit sphere. Tasks are groups of classes with locally numbered labels
//! `0..classes_per_task`; a client only ever sees its own [`TaskStream`].

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor2;

/// Features, local labels and globally unique instance ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub x: Tensor2,
    pub labels: Vec<usize>,
    pub ids: Vec<u64>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    /// Global task id (shared by clients holding the same overlapped task).
    pub id: u32,
    /// Global class id of each local label.
    pub classes: Vec<u32>,
    pub train: Split,
    pub valid: Split,
    pub test: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskStream {
    pub client: u32,
    pub tasks: Vec<Task>,
}

/// Cluster geometry and per-class split sizes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StreamParams {
    pub feature_dim: usize,
    pub sigma: f64,
    pub train_per_class: usize,
    pub valid_per_class: usize,
    pub test_per_class: usize,
    /// Size of the class pool; `None` means exactly as many as needed.
    pub pool_classes: Option<usize>,
}

impl Default for StreamParams {
    fn default() -> Self {
        Self {
            feature_dim: 32,
            sigma: 0.25,
            train_per_class: 100,
            valid_per_class: 30,
            test_per_class: 30,
            pool_classes: None,
        }
    }
}

impl StreamParams {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Validation("feature_dim must be positive and sigma finite and positive".into()));
        }
        if self.train_per_class == 0 || self.valid_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::Validation("every split needs at least one instance per class".into()));
        }
        Ok(())
    }
}

const MAX_MEAN_DRAWS: usize = 10_000;

fn unit_vector<R: Rng>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    libm::sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// Draws `count` class means that are pairwise at least `4 sigma` apart.
fn separated_means<R: Rng>(count: usize, params: &StreamParams, rng: &mut R) -> Result<Vec<Vec<f64>>> {
    let min_gap = 4.0 * params.sigma;
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(count);
    let mut draws = 0;
    while means.len() < count {
        draws += 1;
        if draws > MAX_MEAN_DRAWS {
            return Err(Error::Validation(format!(
                "cannot place {count} class means {min_gap} apart in {} dimensions",
                params.feature_dim
            )));
        }
        let m = unit_vector(params.feature_dim, rng);
        if means.iter().all(|o| distance(o, &m) >= min_gap) {
            means.push(m);
        }
    }
    Ok(means)
}

/// Instances of one class: `n` draws around `mean`.
fn draw_instances<R: Rng>(mean: &[f64], n: usize, sigma: f64, rng: &mut R) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            mean.iter()
                .map(|m| m + sigma * { let z: f64 = StandardNormal.sample(rng); z })
                .collect()
        })
        .collect()
}

struct ClassPool {
    global_class: u32,
    /// `[train, valid, test]` instances as (id, features).
    splits: [Vec<(u64, Vec<f64>)>; 3],
}

fn build_split(dim: usize, parts: Vec<(usize, &[(u64, Vec<f64>)])>) -> Split {
    let n: usize = parts.iter().map(|(_, p)| p.len()).sum();
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    let mut ids = Vec::with_capacity(n);
    for (label, instances) in parts {
        for (id, x) in instances {
            data.extend_from_slice(x);
            labels.push(label);
            ids.push(*id);
        }
    }
    Split {
        x: Tensor2::new(n, dim, data).expect("rows have feature_dim entries"),
        labels,
        ids,
    }
}

fn class_pools<R: Rng>(
    class_ids: &[u32],
    means: &[Vec<f64>],
    sizes: [usize; 3],
    params: &StreamParams,
    next_id: &mut u64,
    rng: &mut R,
) -> Vec<ClassPool> {
    class_ids
        .iter()
        .zip(means)
        .map(|(&c, mean)| {
            let splits = sizes.map(|n| {
                draw_instances(mean, n, params.sigma, rng)
                    .into_iter()
                    .map(|x| {
                        *next_id += 1;
                        (*next_id - 1, x)
                    })
                    .collect()
            });
            ClassPool {
                global_class: c,
                splits,
            }
        })
        .collect()
}

/// Streams whose tasks use pairwise disjoint class sets, dealt to clients
/// without repetition.
pub fn gen_noniid_stream<R: Rng>(
    num_clients: usize,
    tasks_per_client: usize,
    classes_per_task: usize,
    params: &StreamParams,
    rng: &mut R,
) -> Result<Vec<TaskStream>> {
    params.validate()?;
    if num_clients == 0 || tasks_per_client == 0 || classes_per_task == 0 {
        return Err(Error::Validation("stream sizes must be positive".into()));
    }
    let total_tasks = num_clients * tasks_per_client;
    let needed = total_tasks * classes_per_task;
    let pool = params.pool_classes.unwrap_or(needed);
    if pool < needed {
        return Err(Error::Validation(format!(
            "class pool of {pool} cannot supply {needed} disjoint classes"
        )));
    }
    let mut class_ids: Vec<u32> = (0..pool as u32).collect();
    class_ids.shuffle(rng);
    let mut task_order: Vec<usize> = (0..total_tasks).collect();
    task_order.shuffle(rng);
    let sizes = [params.train_per_class, params.valid_per_class, params.test_per_class];
    let mut next_id = 0u64;
    let mut tasks: Vec<Option<Task>> = Vec::with_capacity(total_tasks);
    for t in 0..total_tasks {
        let ids = &class_ids[t * classes_per_task..(t + 1) * classes_per_task];
        let means = separated_means(classes_per_task, params, rng)?;
        let pools = class_pools(ids, &means, sizes, params, &mut next_id, rng);
        tasks.push(Some(assemble_task(t as u32, &pools, params.feature_dim, |_, s| s)));
    }
    let mut streams: Vec<TaskStream> = (0..num_clients)
        .map(|c| TaskStream {
            client: c as u32,
            tasks: Vec::with_capacity(tasks_per_client),
        })
        .collect();
    for (slot, &t) in task_order.iter().enumerate() {
        let task = tasks[t].take().expect("each task is dealt once");
        streams[slot / tasks_per_client].tasks.push(task);
    }
    Ok(streams)
}

fn assemble_task<'a>(
    id: u32,
    pools: &'a [ClassPool],
    dim: usize,
    select: impl Fn(usize, &'a [(u64, Vec<f64>)]) -> &'a [(u64, Vec<f64>)],
) -> Task {
    let split = |k: usize| {
        build_split(
            dim,
            pools
                .iter()
                .enumerate()
                .map(|(label, p)| (label, select(k, &p.splits[k])))
                .collect(),
        )
    };
    Task {
        id,
        classes: pools.iter().map(|p| p.global_class).collect(),
        train: split(0),
        valid: split(1),
        test: split(2),
    }
}

/// Balanced contiguous partition of `n` items into `k` shards.
fn shard_range(n: usize, k: usize, j: usize) -> core::ops::Range<usize> {
    let base = n / k;
    let extra = n % k;
    let start = j * base + j.min(extra);
    let len = base + usize::from(j < extra);
    start..start + len
}

/// Streams drawn from a shared set of global tasks. Each client holds
/// `tasks_per_client` distinct global tasks in random order; the instances
/// of a task held by `k` clients are split into `k` disjoint shards.
pub fn gen_overlapped_stream<R: Rng>(
    num_clients: usize,
    tasks_per_client: usize,
    num_global_tasks: usize,
    classes_per_task: usize,
    params: &StreamParams,
    rng: &mut R,
) -> Result<Vec<TaskStream>> {
    params.validate()?;
    if num_clients == 0 || tasks_per_client == 0 || classes_per_task == 0 {
        return Err(Error::Validation("stream sizes must be positive".into()));
    }
    if tasks_per_client > num_global_tasks {
        return Err(Error::Validation(format!(
            "cannot pick {tasks_per_client} distinct tasks out of {num_global_tasks}"
        )));
    }
    let sizes = [params.train_per_class, params.valid_per_class, params.test_per_class];
    let mut next_id = 0u64;
    let mut global = Vec::with_capacity(num_global_tasks);
    for g in 0..num_global_tasks {
        let ids: Vec<u32> = (0..classes_per_task)
            .map(|c| (g * classes_per_task + c) as u32)
            .collect();
        let means = separated_means(classes_per_task, params, rng)?;
        global.push(class_pools(&ids, &means, sizes, params, &mut next_id, rng));
    }
    let choices: Vec<Vec<usize>> = (0..num_clients)
        .map(|_| {
            let mut all: Vec<usize> = (0..num_global_tasks).collect();
            all.shuffle(rng);
            all.truncate(tasks_per_client);
            all
        })
        .collect();
    let mut holders: Vec<Vec<usize>> = vec![Vec::new(); num_global_tasks];
    for (c, picks) in choices.iter().enumerate() {
        for &g in picks {
            holders[g].push(c);
        }
    }
    let mut streams = Vec::with_capacity(num_clients);
    for (c, picks) in choices.iter().enumerate() {
        let mut tasks = Vec::with_capacity(picks.len());
        for &g in picks {
            let k = holders[g].len();
            let j = holders[g].iter().position(|&h| h == c).expect("holder listed");
            for (split, &n) in sizes.iter().enumerate() {
                if n / k == 0 {
                    return Err(Error::Validation(format!(
                        "task {g}: {n} instances per class in split {split} cannot be shared by {k} clients"
                    )));
                }
            }
            let task = assemble_task(g as u32, &global[g], params.feature_dim, |_, s| {
                &s[shard_range(s.len(), k, j)]
            });
            tasks.push(task);
        }
        streams.push(TaskStream {
            client: c as u32,
            tasks,
        });
    }
    Ok(streams)
}
