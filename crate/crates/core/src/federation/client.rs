//! Learners driven by the federation engine.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::data::{Split, TaskStream};
use crate::error::{Error, Result};
use crate::federation::server::apply_global;
use crate::model::{accuracy, DecomposedClientModel, DenseClientModel, KbItem};
use crate::objective::{dense_fisher, dense_loss, fedweit_loss, FisherDiag, Method, ObjectiveConfig};
use crate::optim::{AdamState, LrSchedule};
use crate::rng::{rng_for, Purpose};
use crate::tape::softmax_ce_forward;
use crate::tensor::Tensor2;

/// What a client exchanges with the server.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    /// Sparse masked base each round, adaptive weights at task end, and
    /// knowledge-base deliveries.
    Decomposed,
    /// Full model each round.
    Dense,
    /// Nothing.
    Local,
}

/// Local optimization settings shared by every client type.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs_per_round: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_factor: f64,
    pub lr_patience: u32,
    pub lr_floor: f64,
    /// Samples per Fisher estimate.
    pub fisher_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_per_round: 1,
            batch_size: 100,
            lr: 1e-3 / 3.0,
            lr_factor: 3.0,
            lr_patience: 5,
            lr_floor: 1e-7,
            fisher_samples: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs_per_round == 0 || self.batch_size == 0 || self.fisher_samples == 0 {
            return Err(Error::Validation("epochs_per_round, batch_size and fisher_samples must be positive".into()));
        }
        LrSchedule::new(self.lr, self.lr_factor, self.lr_patience, self.lr_floor).map(|_| ())
    }

    fn schedule(&self) -> Result<LrSchedule> {
        LrSchedule::new(self.lr, self.lr_factor, self.lr_patience, self.lr_floor)
    }
}

/// A participant as seen by the engine. Task indices are positions in the
/// client's own stream.
pub trait FederatedClient {
    fn id(&self) -> u32;
    fn protocol(&self) -> Protocol;
    fn num_tasks(&self) -> usize;
    /// Layer shapes of the shared upload and of the global parameter.
    fn shared_shapes(&self) -> Vec<(usize, usize)>;
    /// Layer shapes of one adaptive upload or knowledge-base item.
    fn adaptive_shapes(&self) -> Vec<(usize, usize)>;
    fn begin_task(&mut self, task: usize, kb: Vec<Arc<KbItem>>) -> Result<()>;
    fn receive_global(&mut self, global: &[Tensor2]) -> Result<()>;
    fn train_round(&mut self, task: usize, round: usize) -> Result<()>;
    /// Shared parameters in upload layout.
    fn shared_upload(&self) -> Result<Vec<Tensor2>>;
    /// Per-entry relevance of the shared upload, in the same layout, for
    /// clients that choose which entries to send. `None` ranks by value.
    fn shared_scores(&self) -> Result<Option<Vec<Tensor2>>> {
        Ok(None)
    }
    fn adaptive_upload(&self, task: usize) -> Result<Vec<Tensor2>>;
    /// Closes `task` and returns test accuracy on tasks `0..=task`.
    fn end_task(&mut self, task: usize) -> Result<Vec<f64>>;
}

/// Per-task optimizer state.
#[derive(Debug, Clone)]
struct Trainer {
    adam: AdamState,
    schedule: LrSchedule,
    primed: bool,
    stopped: bool,
}

impl Trainer {
    fn new(cfg: &TrainConfig, len: usize) -> Result<Self> {
        Ok(Self {
            adam: AdamState::new(len),
            schedule: cfg.schedule()?,
            primed: false,
            stopped: false,
        })
    }
}

fn mean_ce(logits: &Tensor2, labels: &[usize]) -> Result<f64> {
    let (loss, _) = softmax_ce_forward(logits, labels);
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::Numeric("non-finite validation loss".into()))
    }
}

fn check_task(task: usize, stream: &TaskStream) -> Result<()> {
    if task >= stream.tasks.len() {
        return Err(Error::State(format!(
            "client {} has {} tasks, asked for task {task}",
            stream.client,
            stream.tasks.len()
        )));
    }
    Ok(())
}

/// Runs `epochs_per_round` epochs of minibatch Adam. `step` computes the
/// loss and gradient for a batch, `params`/`set_params` move the flat
/// parameter vector, and `valid` measures validation loss.
#[allow(clippy::too_many_arguments)]
fn run_epochs<M>(
    model: &mut M,
    trainer: &mut Trainer,
    cfg: &TrainConfig,
    train: &Split,
    seed: u64,
    ids: (u32, usize, usize),
    mut step: impl FnMut(&M, &Tensor2, &[usize]) -> Result<(f64, Vec<f64>)>,
    mut params: impl FnMut(&M) -> Result<Vec<f64>>,
    mut set_params: impl FnMut(&mut M, &[f64]) -> Result<()>,
    mut valid: impl FnMut(&M) -> Result<f64>,
) -> Result<()> {
    if trainer.stopped {
        return Ok(());
    }
    if !trainer.primed {
        let reference = valid(model)?;
        trainer.schedule.start_task(Some(reference));
        trainer.primed = true;
    }
    let (client, task, round) = ids;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for e in 0..cfg.epochs_per_round {
        let epoch = (round * cfg.epochs_per_round + e) as u64;
        let mut rng = rng_for(seed, Purpose::Shuffle, u64::from(client), task as u64, epoch);
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let x = train.x.gather_rows(batch);
            let labels: Vec<usize> = batch.iter().map(|&i| train.labels[i]).collect();
            let (loss, grads) = step(model, &x, &labels)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "client {client} task {task}: non-finite training loss"
                )));
            }
            let mut p = params(model)?;
            trainer.adam.step(&mut p, &grads, trainer.schedule.lr())?;
            set_params(model, &p)?;
        }
        let (_, stop) = trainer.schedule.update(valid(model)?);
        if stop {
            trainer.stopped = true;
            break;
        }
    }
    Ok(())
}

/// Client training a decomposed model.
#[derive(Debug, Clone)]
pub struct FedWeitClient {
    model: DecomposedClientModel,
    stream: TaskStream,
    objective: ObjectiveConfig,
    train: TrainConfig,
    seed: u64,
    trainer: Option<Trainer>,
}

impl FedWeitClient {
    pub fn new(
        model: DecomposedClientModel,
        stream: TaskStream,
        objective: ObjectiveConfig,
        train: TrainConfig,
        seed: u64,
    ) -> Result<Self> {
        if objective.method != Method::FedWeit {
            return Err(Error::Validation(format!(
                "decomposed client needs method fedweit, got {}",
                objective.method.name()
            )));
        }
        objective.validate()?;
        train.validate()?;
        if model.client() != stream.client {
            return Err(Error::Validation("model and stream belong to different clients".into()));
        }
        Ok(Self {
            model,
            stream,
            objective,
            train,
            seed,
            trainer: None,
        })
    }

    pub fn model(&self) -> &DecomposedClientModel {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut DecomposedClientModel {
        &mut self.model
    }

    pub fn stream(&self) -> &TaskStream {
        &self.stream
    }

    fn require_current(&self, task: usize) -> Result<()> {
        if self.model.current_task() != Some(task) {
            return Err(Error::State(format!(
                "client {}: task {task} is not in progress",
                self.model.client()
            )));
        }
        Ok(())
    }

    pub fn evaluate(&self, upto: usize) -> Result<Vec<f64>> {
        (0..=upto)
            .map(|i| {
                let test = &self.stream.tasks[i].test;
                Ok(accuracy(&self.model.predict(i, &test.x)?, &test.labels))
            })
            .collect()
    }
}

impl FederatedClient for FedWeitClient {
    fn id(&self) -> u32 {
        self.model.client()
    }

    fn protocol(&self) -> Protocol {
        Protocol::Decomposed
    }

    fn num_tasks(&self) -> usize {
        self.stream.tasks.len()
    }

    fn shared_shapes(&self) -> Vec<(usize, usize)> {
        self.model
            .spec()
            .layers
            .shapes()
            .into_iter()
            .flat_map(|(r, c)| [(r, c), (1, c)])
            .collect()
    }

    fn adaptive_shapes(&self) -> Vec<(usize, usize)> {
        self.model.spec().layers.shapes()
    }

    fn begin_task(&mut self, task: usize, kb: Vec<Arc<KbItem>>) -> Result<()> {
        check_task(task, &self.stream)?;
        if self.model.num_tasks() != task {
            return Err(Error::State(format!(
                "client {} expected task {}, got {task}",
                self.id(),
                self.model.num_tasks()
            )));
        }
        self.model.allocate_task(kb)?;
        self.trainer = None;
        Ok(())
    }

    fn receive_global(&mut self, global: &[Tensor2]) -> Result<()> {
        let mut current: Vec<Tensor2> = self
            .model
            .base()
            .iter()
            .zip(self.model.bias())
            .flat_map(|(w, b)| [w.clone(), b.to_row()])
            .collect();
        apply_global(&mut current, global)?;
        for (l, pair) in current.chunks(2).enumerate() {
            self.model.base_mut()[l] = pair[0].clone();
            self.model.bias_mut()[l] = pair[1].to_vector();
        }
        Ok(())
    }

    fn train_round(&mut self, task: usize, round: usize) -> Result<()> {
        self.require_current(task)?;
        if self.trainer.is_none() {
            let len = self.model.trainable_flat(task)?.len();
            self.trainer = Some(Trainer::new(&self.train, len)?);
        }
        let trainer = self.trainer.as_mut().expect("trainer initialized");
        let split = &self.stream.tasks[task];
        let objective = &self.objective;
        run_epochs(
            &mut self.model,
            trainer,
            &self.train,
            &split.train,
            self.seed,
            (self.stream.client, task, round),
            |m, x, y| fedweit_loss(m, task, x, y, objective).map(|(l, g)| (l, g.flatten())),
            |m| m.trainable_flat(task),
            |m, p| m.set_trainable_flat(task, p),
            |m| mean_ce(&m.predict(task, &split.valid.x)?, &split.valid.labels),
        )
    }

    /// Base interleaved with the biases.
    fn shared_upload(&self) -> Result<Vec<Tensor2>> {
        Ok(self
            .model
            .base()
            .iter()
            .zip(self.model.bias())
            .flat_map(|(w, b)| [w.clone(), b.to_row()])
            .collect())
    }

    /// Masked base `B * m` of the latest task, interleaved with the biases.
    fn shared_scores(&self) -> Result<Option<Vec<Tensor2>>> {
        let latest = self
            .model
            .num_tasks()
            .checked_sub(1)
            .ok_or_else(|| Error::State("no task allocated".into()))?;
        let mask = self.model.mask(latest)?;
        let mut out = Vec::with_capacity(2 * mask.len());
        for ((w, m), b) in self.model.base().iter().zip(mask).zip(self.model.bias()) {
            out.push(w.col_scale(m.data())?);
            out.push(b.to_row());
        }
        Ok(Some(out))
    }

    fn adaptive_upload(&self, task: usize) -> Result<Vec<Tensor2>> {
        Ok(self.model.adaptive(task)?.to_vec())
    }

    fn end_task(&mut self, task: usize) -> Result<Vec<f64>> {
        self.require_current(task)?;
        self.model.finish_task()?;
        self.trainer = None;
        self.evaluate(task)
    }
}

/// Client training a plain network (FedAvg, FedProx, EWC variants).
#[derive(Debug, Clone)]
pub struct DenseClient {
    model: DenseClientModel,
    stream: TaskStream,
    objective: ObjectiveConfig,
    train: TrainConfig,
    seed: u64,
    trainer: Option<Trainer>,
    global: Option<Vec<Tensor2>>,
    fishers: Vec<FisherDiag>,
}

impl DenseClient {
    pub fn new(
        model: DenseClientModel,
        stream: TaskStream,
        objective: ObjectiveConfig,
        train: TrainConfig,
        seed: u64,
    ) -> Result<Self> {
        if objective.method == Method::FedWeit {
            return Err(Error::Validation("dense client cannot run fedweit".into()));
        }
        objective.validate()?;
        train.validate()?;
        if model.client() != stream.client {
            return Err(Error::Validation("model and stream belong to different clients".into()));
        }
        Ok(Self {
            model,
            stream,
            objective,
            train,
            seed,
            trainer: None,
            global: None,
            fishers: Vec::new(),
        })
    }

    pub fn model(&self) -> &DenseClientModel {
        &self.model
    }

    pub fn fishers(&self) -> &[FisherDiag] {
        &self.fishers
    }

    fn require_current(&self, task: usize) -> Result<()> {
        if self.model.current_task() != Some(task) {
            return Err(Error::State(format!(
                "client {}: task {task} is not in progress",
                self.model.client()
            )));
        }
        Ok(())
    }

    pub fn evaluate(&self, upto: usize) -> Result<Vec<f64>> {
        (0..=upto)
            .map(|i| {
                let test = &self.stream.tasks[i].test;
                Ok(accuracy(&self.model.predict(i, &test.x)?, &test.labels))
            })
            .collect()
    }
}

impl FederatedClient for DenseClient {
    fn id(&self) -> u32 {
        self.model.client()
    }

    fn protocol(&self) -> Protocol {
        if self.objective.method.communicates() {
            Protocol::Dense
        } else {
            Protocol::Local
        }
    }

    fn num_tasks(&self) -> usize {
        self.stream.tasks.len()
    }

    fn shared_shapes(&self) -> Vec<(usize, usize)> {
        self.model.shared_shapes()
    }

    fn adaptive_shapes(&self) -> Vec<(usize, usize)> {
        Vec::new()
    }

    fn begin_task(&mut self, task: usize, kb: Vec<Arc<KbItem>>) -> Result<()> {
        check_task(task, &self.stream)?;
        if !kb.is_empty() {
            return Err(Error::Protocol("dense clients take no knowledge-base items".into()));
        }
        if self.model.num_tasks() != task {
            return Err(Error::State(format!(
                "client {} expected task {}, got {task}",
                self.id(),
                self.model.num_tasks()
            )));
        }
        self.model.begin_task()?;
        self.trainer = None;
        Ok(())
    }

    fn receive_global(&mut self, global: &[Tensor2]) -> Result<()> {
        self.model.set_shared_params(global)?;
        self.global = Some(global.to_vec());
        Ok(())
    }

    fn train_round(&mut self, task: usize, round: usize) -> Result<()> {
        self.require_current(task)?;
        if self.trainer.is_none() {
            let len = self.model.trainable_flat(task)?.len();
            self.trainer = Some(Trainer::new(&self.train, len)?);
        }
        let trainer = self.trainer.as_mut().expect("trainer initialized");
        let split = &self.stream.tasks[task];
        let objective = &self.objective;
        let global = self.global.as_deref();
        let fishers = &self.fishers;
        run_epochs(
            &mut self.model,
            trainer,
            &self.train,
            &split.train,
            self.seed,
            (self.stream.client, task, round),
            |m, x, y| dense_loss(m, task, x, y, objective, global, fishers).map(|(l, g)| (l, g.flatten())),
            |m| m.trainable_flat(task),
            |m, p| m.set_trainable_flat(task, p),
            |m| mean_ce(&m.predict(task, &split.valid.x)?, &split.valid.labels),
        )
    }

    fn shared_upload(&self) -> Result<Vec<Tensor2>> {
        Ok(self.model.shared_params())
    }

    fn adaptive_upload(&self, _task: usize) -> Result<Vec<Tensor2>> {
        Err(Error::Protocol("dense clients have no adaptive weights".into()))
    }

    fn end_task(&mut self, task: usize) -> Result<Vec<f64>> {
        self.require_current(task)?;
        if self.objective.method.uses_ewc() {
            let train = &self.stream.tasks[task].train;
            let n = train.len().min(self.train.fisher_samples);
            let mut rng = rng_for(self.seed, Purpose::Fisher, u64::from(self.id()), task as u64, 0);
            let mut picks = rand::seq::index::sample(&mut rng, train.len(), n).into_vec();
            picks.sort_unstable();
            let fisher = dense_fisher(&self.model, task, &train.x, &train.labels, &picks)?;
            self.fishers.push(fisher);
        }
        self.model.finish_task()?;
        self.trainer = None;
        self.evaluate(task)
    }
}
