//! One seeded run: build streams and clients, federate, collect metrics.

use alloc::vec::Vec;

use crate::data::{gen_noniid_stream, gen_overlapped_stream, StreamParams, TaskStream};
use crate::error::{Error, Result};
use crate::federation::{
    CommLedger, DenseClient, Delivery, FedWeitClient, FederatedClient, FederationConfig, Simulation,
    TrainConfig,
};
use crate::metrics::{mean, AccuracyMatrix};
use crate::model::{init_shared, DecomposedClientModel, DenseClientModel, LayerSpec, ModelSpec};
use crate::objective::{Method, ObjectiveConfig};
use crate::rng::{rng_for, Purpose};
use crate::tensor::Tensor2;

#[derive(Debug, Clone, PartialEq)]
pub enum StreamKind {
    /// Every task has its own classes.
    NonIid,
    /// Clients draw tasks from a shared pool of `global_tasks`.
    Overlapped { global_tasks: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Schedule {
    Sync,
    /// `budgets[c][t]`: rounds client `c` spends on task `t`.
    Async { budgets: Vec<Vec<usize>> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub objective: ObjectiveConfig,
    pub clients: usize,
    pub tasks_per_client: usize,
    pub classes_per_task: usize,
    pub stream: StreamKind,
    pub stream_params: StreamParams,
    /// Widths of the hidden layers; the input width is the feature dimension.
    pub hidden: Vec<usize>,
    pub federation: FederationConfig,
    pub train: TrainConfig,
    pub schedule: Schedule,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            objective: ObjectiveConfig::new(Method::FedWeit),
            clients: 5,
            tasks_per_client: 5,
            classes_per_task: 5,
            stream: StreamKind::Overlapped { global_tasks: 10 },
            stream_params: StreamParams::default(),
            hidden: alloc::vec![64],
            federation: FederationConfig::default(),
            train: TrainConfig::default(),
            schedule: Schedule::Sync,
        }
    }
}

impl ExperimentConfig {
    pub fn method(&self) -> Method {
        self.objective.method
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        let mut dims = alloc::vec![self.stream_params.feature_dim];
        dims.extend_from_slice(&self.hidden);
        ModelSpec::new(LayerSpec::new(&dims)?, Some(self.classes_per_task))
    }

    pub fn validate(&self) -> Result<()> {
        self.objective.validate()?;
        self.federation.validate()?;
        self.train.validate()?;
        self.stream_params.validate()?;
        if self.clients == 0 || self.tasks_per_client == 0 || self.classes_per_task < 2 {
            return Err(Error::Validation("clients and tasks must be positive and tasks need at least 2 classes".into()));
        }
        if self.hidden.is_empty() {
            return Err(Error::Validation("at least one hidden layer is required".into()));
        }
        self.model_spec()?;
        if let Schedule::Async { budgets } = &self.schedule {
            if budgets.len() != self.clients
                || budgets.iter().any(|b| b.len() != self.tasks_per_client || b.contains(&0))
            {
                return Err(Error::Validation("budgets must list a positive round count per client and task".into()));
            }
        }
        Ok(())
    }

    pub fn streams(&self, seed: u64) -> Result<Vec<TaskStream>> {
        let mut rng = rng_for(seed, Purpose::Data, 0, 0, 0);
        match self.stream {
            StreamKind::NonIid => gen_noniid_stream(
                self.clients,
                self.tasks_per_client,
                self.classes_per_task,
                &self.stream_params,
                &mut rng,
            ),
            StreamKind::Overlapped { global_tasks } => gen_overlapped_stream(
                self.clients,
                self.tasks_per_client,
                global_tasks,
                self.classes_per_task,
                &self.stream_params,
                &mut rng,
            ),
        }
    }
}

/// Everything a seeded run produces.
#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub seed: u64,
    pub accuracy: Vec<AccuracyMatrix>,
    pub ledger: CommLedger,
    pub deliveries: Vec<Delivery>,
    pub rounds: u64,
    pub kb_len: usize,
    /// Parameter count of one client's shared upload.
    pub shared_params: usize,
    /// Parameter count of one client's adaptive upload.
    pub adaptive_params: usize,
}

impl SeedOutcome {
    /// Mean over clients of the average accuracy after the final task.
    pub fn final_avg_accuracy(&self) -> Result<f64> {
        let v = self
            .accuracy
            .iter()
            .map(|m| m.avg_accuracy(m.tasks()))
            .collect::<Result<Vec<_>>>()?;
        Ok(mean(&v))
    }

    /// Mean over clients of forgetting at the final task.
    pub fn final_forgetting(&self) -> Result<f64> {
        let v = self
            .accuracy
            .iter()
            .map(|m| m.forgetting(m.tasks()))
            .collect::<Result<Vec<_>>>()?;
        Ok(mean(&v))
    }
}

fn drive<C: FederatedClient>(
    cfg: &ExperimentConfig,
    seed: u64,
    clients: Vec<C>,
    global: Vec<Tensor2>,
) -> Result<SeedOutcome> {
    let shared_params = global.iter().map(Tensor2::len).sum();
    let adaptive_params = clients[0]
        .adaptive_shapes()
        .iter()
        .map(|(r, c)| r * c)
        .sum();
    let fed = FederationConfig {
        seed,
        ..cfg.federation.clone()
    };
    let mut sim = Simulation::new(fed, clients, global)?;
    match &cfg.schedule {
        Schedule::Sync => sim.run_sync()?,
        Schedule::Async { budgets } => sim.run_async(budgets)?,
    }
    Ok(SeedOutcome {
        seed,
        accuracy: sim.accuracy().to_vec(),
        ledger: sim.ledger().clone(),
        deliveries: sim.deliveries().to_vec(),
        rounds: sim.round(),
        kb_len: sim.kb().len(),
        shared_params,
        adaptive_params,
    })
}

/// Runs the experiment under one root seed.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedOutcome> {
    cfg.validate()?;
    let spec = cfg.model_spec()?;
    let streams = cfg.streams(seed)?;
    let mut rng = rng_for(seed, Purpose::GlobalInit, 0, 0, 0);
    let (weights, biases) = init_shared(&spec.layers, &mut rng);
    let global: Vec<Tensor2> = weights
        .iter()
        .zip(&biases)
        .flat_map(|(w, b)| [w.clone(), b.to_row()])
        .collect();
    if cfg.method() == Method::FedWeit {
        let clients = streams
            .into_iter()
            .map(|s| {
                let model = DecomposedClientModel::new(s.client, spec.clone(), weights.clone(), biases.clone())?;
                FedWeitClient::new(model, s, cfg.objective, cfg.train.clone(), seed)
            })
            .collect::<Result<Vec<_>>>()?;
        drive(cfg, seed, clients, global)
    } else {
        let clients = streams
            .into_iter()
            .map(|s| {
                let model = DenseClientModel::new(s.client, spec.clone(), weights.clone(), biases.clone())?;
                DenseClient::new(model, s, cfg.objective, cfg.train.clone(), seed)
            })
            .collect::<Result<Vec<_>>>()?;
        drive(cfg, seed, clients, global)
    }
}
