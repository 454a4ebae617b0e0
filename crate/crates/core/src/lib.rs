//! Federated continual learning simulator core.
//!
//! Everything here is `no_std` with `alloc`: tensors and reverse-mode
//! differentiation, the decomposed client model and dense baselines,
//! training objectives, Adam with a plateau schedule, synthetic task
//! streams, continual-learning metrics, and the federation protocol with
//! its wire codec and communication ledger. File formats and the command
//! line live in the companion `fcl` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod data;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod optim;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Tensor1, Tensor2};
