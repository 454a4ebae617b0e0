//! Round orchestration, transport and bookkeeping.
//!
//! Every payload is framed, decoded on the receiving side and logged in the
//! ledger, so what a client or the server works with is exactly what
//! crossed the wire.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::federation::client::{FederatedClient, Protocol};
use crate::federation::kb::KnowledgeBase;
use crate::federation::ledger::{CommLedger, Direction, LedgerRecord, Party};
use crate::federation::payload::{sparsify_topk, sparsify_topk_by, PayloadKind, SparsePayload};
use crate::federation::server::{aggregate_global, sample_clients};
use crate::metrics::AccuracyMatrix;
use crate::model::KbItem;
use crate::rng::{rng_for, Purpose};
use crate::tensor::Tensor2;

/// What a decomposed client sends as its shared upload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BaseUpload {
    /// Base entries at the top positions of `|B * m|`. The server's average
    /// then replaces base entries without rescaling them by the mask.
    #[default]
    MaskSelected,
    /// The masked product `B * m` itself. Writing the average back into `B`
    /// multiplies the base by the mask every round.
    MaskedProduct,
}

/// When adaptive weights reach the knowledge base.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KbSchedule {
    /// Every client uploads its adaptive weights when a task ends; the
    /// knowledge base accumulates across tasks.
    #[default]
    TaskEnd,
    /// In the first round of each task after the first, that round's
    /// participants upload the previous task's adaptive weights and the
    /// knowledge base holds only those.
    RoundOneOfNextTask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederationConfig {
    /// Fraction of clients taking part in each round.
    pub fraction: f64,
    pub rounds_per_task: usize,
    /// Share of shared-parameter entries uploaded each round.
    pub kappa_base: f64,
    /// Share of adaptive entries uploaded at task end.
    pub kappa_adaptive: f64,
    /// Knowledge-base items delivered per task; `None` delivers all.
    pub kb_sample: Option<usize>,
    pub kb_schedule: KbSchedule,
    pub base_upload: BaseUpload,
    pub seed: u64,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            fraction: 1.0,
            rounds_per_task: 20,
            kappa_base: 0.3,
            kappa_adaptive: 0.03,
            kb_sample: None,
            kb_schedule: KbSchedule::TaskEnd,
            base_upload: BaseUpload::MaskSelected,
            seed: 0,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::Validation(format!(
                "fraction must be in (0, 1], got {}",
                self.fraction
            )));
        }
        if self.rounds_per_task == 0 {
            return Err(Error::Validation("rounds_per_task must be positive".into()));
        }
        for (name, k) in [("kappa_base", self.kappa_base), ("kappa_adaptive", self.kappa_adaptive)] {
            if !(k > 0.0 && k <= 1.0) {
                return Err(Error::Validation(format!("{name} must be in (0, 1], got {k}")));
            }
        }
        Ok(())
    }
}

/// One knowledge-base delivery.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivery {
    pub client: u32,
    pub task: u32,
    pub round: u64,
    /// `(origin client, origin task)` of each delivered item.
    pub items: Vec<(u32, u32)>,
}

#[derive(Debug)]
pub struct Simulation<C: FederatedClient> {
    cfg: FederationConfig,
    clients: Vec<C>,
    protocol: Protocol,
    global: Vec<Tensor2>,
    kb: KnowledgeBase,
    ledger: CommLedger,
    accuracy: Vec<AccuracyMatrix>,
    deliveries: Vec<Delivery>,
    round: u64,
    next_task: usize,
}

/// A framed message with its decoded contents.
struct Frame {
    bytes: u64,
    decoded: SparsePayload,
}

impl<C: FederatedClient> Simulation<C> {
    /// `initial_global` is sent to clients in their first round.
    pub fn new(cfg: FederationConfig, clients: Vec<C>, initial_global: Vec<Tensor2>) -> Result<Self> {
        cfg.validate()?;
        let first = clients
            .first()
            .ok_or_else(|| Error::Validation("a federation needs at least one client".into()))?;
        let protocol = first.protocol();
        for (i, c) in clients.iter().enumerate() {
            if c.id() as usize != i {
                return Err(Error::Validation(format!("client at position {i} has id {}", c.id())));
            }
            if c.protocol() != protocol {
                return Err(Error::Validation("clients disagree on protocol".into()));
            }
            if c.num_tasks() == 0 {
                return Err(Error::Validation(format!("client {i} has no tasks")));
            }
        }
        let shapes: Vec<(usize, usize)> = initial_global.iter().map(Tensor2::shape).collect();
        if protocol != Protocol::Local && shapes != first.shared_shapes() {
            return Err(Error::Validation("initial global parameter does not match the clients' shared shapes".into()));
        }
        let n = clients.len();
        Ok(Self {
            cfg,
            clients,
            protocol,
            global: initial_global,
            kb: KnowledgeBase::new(),
            ledger: CommLedger::new(),
            accuracy: vec![AccuracyMatrix::new(); n],
            deliveries: Vec::new(),
            round: 0,
            next_task: 0,
        })
    }

    pub fn config(&self) -> &FederationConfig {
        &self.cfg
    }

    pub fn clients(&self) -> &[C] {
        &self.clients
    }

    pub fn protocol(&self) -> Protocol {
        self.protocol
    }

    pub fn global(&self) -> &[Tensor2] {
        &self.global
    }

    pub fn kb(&self) -> &KnowledgeBase {
        &self.kb
    }

    pub fn ledger(&self) -> &CommLedger {
        &self.ledger
    }

    /// Accuracy matrix per client.
    pub fn accuracy(&self) -> &[AccuracyMatrix] {
        &self.accuracy
    }

    pub fn deliveries(&self) -> &[Delivery] {
        &self.deliveries
    }

    /// Rounds run so far.
    pub fn round(&self) -> u64 {
        self.round
    }

    fn communicates(&self) -> bool {
        self.protocol != Protocol::Local
    }

    fn frame(payload: &SparsePayload, shapes: &[(usize, usize)]) -> Result<Frame> {
        let bytes = payload.encode()?;
        let decoded = SparsePayload::decode(&bytes, shapes)?;
        Ok(Frame {
            bytes: bytes.len() as u64,
            decoded,
        })
    }

    fn log(&mut self, frame: &Frame, task: usize, direction: Direction, client: usize) -> Result<()> {
        let (sender, receiver) = match direction {
            Direction::ClientToServer => (Party::Client(client as u32), Party::Server),
            Direction::ServerToClient => (Party::Server, Party::Client(client as u32)),
        };
        self.ledger.record(LedgerRecord {
            round: self.round,
            task: task as u32,
            direction,
            sender,
            receiver,
            kind: frame.decoded.kind,
            nonzeros: frame.decoded.nonzeros(),
            value_bytes: frame.decoded.value_bytes(),
            wire_bytes: frame.bytes,
        })
    }

    fn global_frame(&self) -> Result<Frame> {
        let payload = match self.protocol {
            Protocol::Decomposed => SparsePayload::nonzeros_of(PayloadKind::Global, &self.global),
            _ => SparsePayload::dense(PayloadKind::DenseGlobal, &self.global),
        };
        Self::frame(&payload, &self.clients[0].shared_shapes())
    }

    fn send_global(&mut self, frame: &Frame, client: usize, task: usize) -> Result<()> {
        self.log(frame, task, Direction::ServerToClient, client)?;
        self.clients[client].receive_global(&frame.decoded.to_dense())
    }

    fn upload_shared(&mut self, client: usize, task: usize) -> Result<SparsePayload> {
        let values = self.clients[client].shared_upload()?;
        let payload = match self.protocol {
            Protocol::Decomposed => {
                let kappa = self.cfg.kappa_base;
                match (self.clients[client].shared_scores()?, self.cfg.base_upload) {
                    (Some(scores), BaseUpload::MaskSelected) => {
                        sparsify_topk_by(PayloadKind::Base, &values, &scores, kappa)?
                    }
                    (Some(scores), BaseUpload::MaskedProduct) => {
                        sparsify_topk(PayloadKind::Base, &scores, kappa)?
                    }
                    (None, _) => sparsify_topk(PayloadKind::Base, &values, kappa)?,
                }
            }
            _ => SparsePayload::dense(PayloadKind::DenseModel, &values),
        };
        let frame = Self::frame(&payload, &self.clients[client].shared_shapes())?;
        self.log(&frame, task, Direction::ClientToServer, client)?;
        Ok(frame.decoded)
    }

    fn upload_adaptive(&mut self, client: usize, task: usize) -> Result<()> {
        let tensors = self.clients[client].adaptive_upload(task)?;
        let payload = sparsify_topk(PayloadKind::Adaptive, &tensors, self.cfg.kappa_adaptive)?;
        let frame = Self::frame(&payload, &self.clients[client].adaptive_shapes())?;
        self.log(&frame, task, Direction::ClientToServer, client)?;
        let item = KbItem::new(client as u32, task as u32, frame.decoded.to_dense());
        self.kb.add(item, self.round)
    }

    /// Delivers knowledge (decomposed protocol) and opens `task` on `client`.
    fn start_client_task(&mut self, client: usize, task: usize) -> Result<()> {
        if self.protocol != Protocol::Decomposed {
            return self.clients[client].begin_task(task, Vec::new());
        }
        let mut rng = rng_for(self.cfg.seed, Purpose::KbSampling, client as u64, task as u64, 0);
        let sampled = self.kb.sample(client as u32, self.cfg.kb_sample, &mut rng);
        let shapes = self.clients[client].adaptive_shapes();
        let mut bundle = SparsePayload {
            kind: PayloadKind::Knowledge,
            layers: Vec::new(),
        };
        for item in &sampled {
            bundle
                .layers
                .extend(SparsePayload::nonzeros_of(PayloadKind::Knowledge, item.tensors()).layers);
        }
        let frame = Self::frame(&bundle, &shapes)?;
        self.log(&frame, task, Direction::ServerToClient, client)?;
        let received: Vec<Arc<KbItem>> = if shapes.is_empty() {
            Vec::new()
        } else {
            frame
                .decoded
                .layers
                .chunks(shapes.len())
                .zip(&sampled)
                .map(|(layers, origin)| {
                    Arc::new(KbItem::new(
                        origin.origin_client(),
                        origin.origin_task(),
                        layers.iter().map(|l| l.to_dense()).collect(),
                    ))
                })
                .collect()
        };
        self.deliveries.push(Delivery {
            client: client as u32,
            task: task as u32,
            round: self.round,
            items: sampled
                .iter()
                .map(|i| (i.origin_client(), i.origin_task()))
                .collect(),
        });
        self.clients[client].begin_task(task, received)
    }

    fn finish(&mut self, client: usize, task: usize) -> Result<()> {
        let row = self.clients[client].end_task(task)?;
        self.accuracy[client].push_row(row)
    }

    /// Runs every task in lockstep.
    pub fn run_sync(&mut self) -> Result<()> {
        let tasks = self.clients[0].num_tasks();
        if self.clients.iter().any(|c| c.num_tasks() != tasks) {
            return Err(Error::Validation("synchronous runs need the same number of tasks on every client".into()));
        }
        while self.next_task < tasks {
            self.run_task_sync()?;
        }
        Ok(())
    }

    /// Runs the next task for all clients: `rounds_per_task` rounds, then
    /// adaptive uploads and evaluation.
    pub fn run_task_sync(&mut self) -> Result<()> {
        let t = self.next_task;
        if self.clients.iter().any(|c| t >= c.num_tasks()) {
            return Err(Error::State(format!("task {t} is past the end of a client's stream")));
        }
        let n = self.clients.len();
        let mut started = vec![false; n];
        for r in 0..self.cfg.rounds_per_task {
            self.round += 1;
            let mut rng = rng_for(self.cfg.seed, Purpose::ClientSampling, t as u64, r as u64, 0);
            let participants = sample_clients(n, self.cfg.fraction, &mut rng)?;
            if self.protocol == Protocol::Decomposed
                && self.cfg.kb_schedule == KbSchedule::RoundOneOfNextTask
                && r == 0
                && t > 0
            {
                self.kb.clear();
                for &c in &participants {
                    self.upload_adaptive(c, t - 1)?;
                }
            }
            let frame = if self.communicates() {
                Some(self.global_frame()?)
            } else {
                None
            };
            let mut uploads = Vec::with_capacity(participants.len());
            for &c in &participants {
                if !started[c] {
                    self.start_client_task(c, t)?;
                    started[c] = true;
                }
                if let Some(f) = &frame {
                    self.send_global(f, c, t)?;
                }
                self.clients[c].train_round(t, r)?;
                if self.communicates() {
                    uploads.push(self.upload_shared(c, t)?);
                }
            }
            if self.communicates() {
                self.global = aggregate_global(&uploads)?;
            }
        }
        for c in 0..n {
            if !started[c] {
                self.clients[c].begin_task(t, Vec::new())?;
            }
        }
        if self.protocol == Protocol::Decomposed && self.cfg.kb_schedule == KbSchedule::TaskEnd {
            for c in 0..n {
                self.upload_adaptive(c, t)?;
            }
        }
        for c in 0..n {
            self.finish(c, t)?;
        }
        self.next_task += 1;
        Ok(())
    }

    /// Every unfinished client runs one round per tick; `budgets[c][t]` is
    /// the number of rounds client `c` spends on its task `t`. A client's
    /// adaptive weights join the knowledge base in the tick it finishes the
    /// task, so faster clients can pass knowledge to slower ones mid-task.
    pub fn run_async(&mut self, budgets: &[Vec<usize>]) -> Result<()> {
        if self.cfg.kb_schedule != KbSchedule::TaskEnd {
            return Err(Error::Validation("asynchronous runs store adaptive weights at task end".into()));
        }
        if self.next_task != 0 || self.round != 0 {
            return Err(Error::State("asynchronous run on a used simulation".into()));
        }
        let n = self.clients.len();
        if budgets.len() != n {
            return Err(Error::Validation(format!("{} budgets for {n} clients", budgets.len())));
        }
        for (c, b) in budgets.iter().enumerate() {
            if b.len() != self.clients[c].num_tasks() {
                return Err(Error::Validation(format!(
                    "client {c}: {} budgets for {} tasks",
                    b.len(),
                    self.clients[c].num_tasks()
                )));
            }
            if b.contains(&0) {
                return Err(Error::Validation(format!("client {c}: round budgets must be positive")));
            }
        }
        let mut pos = vec![(0usize, 0usize); n];
        loop {
            let active: Vec<usize> = (0..n).filter(|&c| pos[c].0 < budgets[c].len()).collect();
            if active.is_empty() {
                break;
            }
            self.round += 1;
            let frame = if self.communicates() {
                Some(self.global_frame()?)
            } else {
                None
            };
            let mut uploads = Vec::with_capacity(active.len());
            let mut finishing = Vec::new();
            for &c in &active {
                let (t, r) = pos[c];
                if r == 0 {
                    self.start_client_task(c, t)?;
                }
                if let Some(f) = &frame {
                    self.send_global(f, c, t)?;
                }
                self.clients[c].train_round(t, r)?;
                if self.communicates() {
                    uploads.push(self.upload_shared(c, t)?);
                }
                if r + 1 == budgets[c][t] {
                    finishing.push(c);
                }
            }
            if self.communicates() {
                self.global = aggregate_global(&uploads)?;
            }
            if self.protocol == Protocol::Decomposed {
                for &c in &finishing {
                    self.upload_adaptive(c, pos[c].0)?;
                }
            }
            for &c in &finishing {
                self.finish(c, pos[c].0)?;
            }
            for &c in &active {
                pos[c] = if finishing.contains(&c) {
                    (pos[c].0 + 1, 0)
                } else {
                    (pos[c].0, pos[c].1 + 1)
                };
            }
        }
        self.next_task = budgets.iter().map(Vec::len).max().unwrap_or(0);
        Ok(())
    }
}
