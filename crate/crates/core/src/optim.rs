//! Adam over flat parameter vectors and the validation-driven learning
//! rate schedule.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{dim_err, Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    first: Vec<f64>,
    second: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            first: vec![0.0; len],
            second: vec![0.0; len],
            step: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.first.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first.is_empty()
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update at learning rate `lr`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(dim_err(
                "adam_step",
                format!(
                    "state for {} parameters, got {} params and {} grads",
                    self.first.len(),
                    params.len(),
                    grads.len()
                ),
            ));
        }
        self.step += 1;
        let c1 = 1.0 - libm::pow(BETA1, self.step as f64);
        let c2 = 1.0 - libm::pow(BETA2, self.step as f64);
        for i in 0..params.len() {
            let g = grads[i];
            self.first[i] = BETA1 * self.first[i] + (1.0 - BETA1) * g;
            self.second[i] = BETA2 * self.second[i] + (1.0 - BETA2) * g * g;
            let m_hat = self.first[i] / c1;
            let v_hat = self.second[i] / c2;
            params[i] -= lr * m_hat / (libm::sqrt(v_hat) + EPSILON);
        }
        Ok(())
    }
}

/// Divides the learning rate after a run of epochs without a new best
/// validation loss, and signals a stop once the rate reaches the floor.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    initial: f64,
    factor: f64,
    patience: u32,
    floor: f64,
    lr: f64,
    best: f64,
    stale: u32,
}

impl LrSchedule {
    /// `factor` 3 and `patience` 5 are the usual settings.
    pub fn new(initial: f64, factor: f64, patience: u32, floor: f64) -> Result<Self> {
        if !(initial > 0.0 && floor > 0.0 && floor < initial) {
            return Err(Error::Validation(format!(
                "need 0 < floor ({floor}) < initial lr ({initial})"
            )));
        }
        if patience == 0 || !(factor > 1.0) {
            return Err(Error::Validation("patience must be >= 1 and factor > 1".into()));
        }
        Ok(Self {
            initial,
            factor,
            patience,
            floor,
            lr: initial,
            best: f64::INFINITY,
            stale: 0,
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn initial(&self) -> f64 {
        self.initial
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    /// Resets the rate for a new task. `reference` is the validation loss
    /// measured before any training on it; later epochs must beat it.
    pub fn start_task(&mut self, reference: Option<f64>) {
        self.lr = self.initial;
        self.best = reference.unwrap_or(f64::INFINITY);
        self.stale = 0;
    }

    /// Feeds one epoch's validation loss. Returns the rate to use next and
    /// whether training on this task should stop.
    pub fn update(&mut self, valid_loss: f64) -> (f64, bool) {
        if valid_loss < self.best {
            self.best = valid_loss;
            self.stale = 0;
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                self.lr /= self.factor;
                self.stale = 0;
            }
        }
        (self.lr, self.lr <= self.floor)
    }
}
