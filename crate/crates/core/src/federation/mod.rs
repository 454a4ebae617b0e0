//! Server, clients and transport.

pub mod client;
pub mod engine;
pub mod kb;
pub mod ledger;
pub mod payload;
pub mod server;

pub use client::{DenseClient, FedWeitClient, FederatedClient, Protocol, TrainConfig};
pub use engine::{BaseUpload, Delivery, FederationConfig, KbSchedule, Simulation};
pub use kb::{KbEntry, KnowledgeBase};
pub use ledger::{CommLedger, Direction, LedgerRecord, Party, Totals};
pub use payload::{sparsify_topk, sparsify_topk_by, topk_count, PayloadKind, SparseLayer, SparsePayload};
pub use server::{aggregate_global, apply_global, sample_clients};
