//! Training objectives.
//!
//! The decomposed objective for task `t` is
//!
//! ```text
//! CE(theta[t]) + l1 * (|m[t]|_1 + sum_{i<=t} |A[i]|_1)
//!              + drift * sum_{i<t} |dB * diag(m[i]) + dA[i]|_F^2
//! ```
//!
//! with `dB` and `dA[i]` measured from the snapshot taken when task `t`
//! was allocated. Baselines use cross-entropy plus an optional proximal term
//! towards the last global model and an optional EWC term.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::{DecomposedClientModel, DecomposedGrads, DenseClientModel, DenseGrads, Head};
use crate::tape::Tape;
use crate::tensor::{Tensor1, Tensor2};

/// Training method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    FedWeit,
    FedProx,
    FedProxEwc,
    FedAvg,
    LocalEwc,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::FedWeit,
        Method::FedProx,
        Method::FedProxEwc,
        Method::FedAvg,
        Method::LocalEwc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::FedWeit => "fedweit",
            Method::FedProx => "fedprox",
            Method::FedProxEwc => "fedprox_ewc",
            Method::FedAvg => "fedavg",
            Method::LocalEwc => "local_ewc",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }

    pub fn uses_proximal(self) -> bool {
        matches!(self, Method::FedProx | Method::FedProxEwc)
    }

    pub fn uses_ewc(self) -> bool {
        matches!(self, Method::FedProxEwc | Method::LocalEwc)
    }

    pub fn communicates(self) -> bool {
        self != Method::LocalEwc
    }
}

/// Penalty weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveConfig {
    pub method: Method,
    /// Sparsity weight on masks and adaptive weights.
    pub l1: f64,
    /// Weight of the retroactive drift term.
    pub drift: f64,
    /// Proximal weight (FedProx).
    pub prox: f64,
    /// EWC weight.
    pub ewc: f64,
}

impl ObjectiveConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            l1: 0.1,
            drift: 100.0,
            prox: 5e-3,
            ewc: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("l1", self.l1),
            ("drift", self.drift),
            ("prox", self.prox),
            ("ewc", self.ewc),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Validation(format!("{name} weight must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Value and subgradients of the l1 term.
#[derive(Debug, Clone, PartialEq)]
pub struct L1Penalty {
    pub value: f64,
    pub mask: Vec<Tensor1>,
    /// `adaptive[i]` for tasks `0..=t`.
    pub adaptive: Vec<Vec<Tensor2>>,
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `|m[t]|_1 + sum_{i<=t} |A[i]|_1` with `sign` subgradients (0 at 0).
/// Attention is not regularized.
pub fn l1_penalty(model: &DecomposedClientModel, task: usize) -> Result<L1Penalty> {
    let mask = model.mask(task)?;
    let mut value = 0.0;
    let mut mask_grad = Vec::with_capacity(mask.len());
    for m in mask {
        value += m.data().iter().map(|v| v.abs()).sum::<f64>();
        mask_grad.push(Tensor1::new(m.data().iter().map(|&v| sign(v)).collect()));
    }
    let mut adaptive = Vec::with_capacity(task + 1);
    for i in 0..=task {
        let mut per_layer = Vec::new();
        for a in model.adaptive(i)? {
            value += a.abs_sum();
            per_layer.push(a.map(sign));
        }
        adaptive.push(per_layer);
    }
    Ok(L1Penalty {
        value,
        mask: mask_grad,
        adaptive,
    })
}

/// Value and gradients of the drift term.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftPenalty {
    pub value: f64,
    pub base: Vec<Tensor2>,
    /// `adaptive[i]` for past tasks `0..t`.
    pub adaptive: Vec<Vec<Tensor2>>,
}

/// `sum_{i<t} |dB * diag(m[i]) + dA[i]|_F^2` for the task in progress.
pub fn drift_penalty(model: &DecomposedClientModel, task: usize) -> Result<DriftPenalty> {
    if model.current_task() != Some(task) {
        return Err(Error::State(format!(
            "drift is only defined for the task in progress (asked for {task})"
        )));
    }
    let delta_b = model.base_delta()?;
    let mut base: Vec<Tensor2> = delta_b
        .iter()
        .map(|d| Tensor2::zeros(d.rows(), d.cols()))
        .collect();
    let mut value = 0.0;
    let mut adaptive = Vec::with_capacity(task);
    for i in 0..task {
        let masks = model.mask(i)?;
        let delta_a = model.adaptive_delta(i)?;
        let mut per_layer = Vec::with_capacity(delta_a.len());
        for l in 0..delta_b.len() {
            let mut d = delta_b[l].col_scale(masks[l].data())?;
            d.add_scaled_assign(&delta_a[l], 1.0)?;
            value += d.sq_sum();
            base[l].add_scaled_assign(&d.col_scale(masks[l].data())?, 2.0)?;
            per_layer.push(d.scale(2.0));
        }
        adaptive.push(per_layer);
    }
    Ok(DriftPenalty {
        value,
        base,
        adaptive,
    })
}

/// Cross-entropy of `task` over a batch, for the decomposed model, with
/// gradients for all decomposition pieces.
pub fn decomposed_cross_entropy(
    model: &DecomposedClientModel,
    task: usize,
    x: &Tensor2,
    labels: &[usize],
) -> Result<(f64, DecomposedGrads)> {
    let mut grads = DecomposedGrads::zeros_like(model, task)?;
    let mut tape = Tape::new();
    let trace = model.forward_composed(&mut tape, task, x)?;
    let loss = tape.softmax_cross_entropy(trace.logits, labels)?;
    let value = tape.value(loss)?.data()[0];
    let g = tape.backward(loss)?;
    let dtheta = trace
        .theta
        .iter()
        .map(|&v| g.wrt(&tape, v))
        .collect::<Result<Vec<_>>>()?;
    let (db, dm, da, dalpha) = model.route_gradients(task, &dtheta)?;
    grads.base = db;
    grads.mask = dm;
    grads.adaptive[task] = da;
    grads.attention = dalpha;
    grads.bias = trace
        .bias
        .iter()
        .map(|&v| g.wrt(&tape, v).map(|t| t.to_vector()))
        .collect::<Result<Vec<_>>>()?;
    if let Some((w, b)) = trace.head {
        grads.head = Some(Head {
            weight: g.wrt(&tape, w)?,
            bias: g.wrt(&tape, b)?.to_vector(),
        });
    }
    Ok((value, grads))
}

/// Full decomposed objective and its gradients.
pub fn fedweit_loss(
    model: &DecomposedClientModel,
    task: usize,
    x: &Tensor2,
    labels: &[usize],
    cfg: &ObjectiveConfig,
) -> Result<(f64, DecomposedGrads)> {
    if cfg.method != Method::FedWeit {
        return Err(Error::Validation(format!(
            "decomposed objective requested with method {}",
            cfg.method.name()
        )));
    }
    let (ce, mut grads) = decomposed_cross_entropy(model, task, x, labels)?;
    let mut total = ce;
    if cfg.l1 > 0.0 {
        let l1 = l1_penalty(model, task)?;
        total += cfg.l1 * l1.value;
        for (g, s) in grads.mask.iter_mut().zip(&l1.mask) {
            for (a, b) in g.data_mut().iter_mut().zip(s.data()) {
                *a += cfg.l1 * b;
            }
        }
        for (gi, si) in grads.adaptive.iter_mut().zip(&l1.adaptive) {
            for (g, s) in gi.iter_mut().zip(si) {
                g.add_scaled_assign(s, cfg.l1)?;
            }
        }
    }
    if cfg.drift > 0.0 && task > 0 {
        let drift = drift_penalty(model, task)?;
        total += cfg.drift * drift.value;
        for (g, s) in grads.base.iter_mut().zip(&drift.base) {
            g.add_scaled_assign(s, cfg.drift)?;
        }
        for (gi, si) in grads.adaptive.iter_mut().zip(&drift.adaptive) {
            for (g, s) in gi.iter_mut().zip(si) {
                g.add_scaled_assign(s, cfg.drift)?;
            }
        }
    }
    Ok((total, grads))
}

/// `(mu / 2) |theta - theta_global|^2` and its gradient `mu (theta - theta_global)`.
pub fn fedprox_penalty(local: &[Tensor2], global: &[Tensor2], mu: f64) -> Result<(f64, Vec<Tensor2>)> {
    if local.len() != global.len() {
        return Err(crate::error::dim_err(
            "fedprox_penalty",
            format!("{} local tensors vs {} global", local.len(), global.len()),
        ));
    }
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(local.len());
    for (l, g) in local.iter().zip(global) {
        let d = l.sub(g)?;
        value += 0.5 * mu * d.sq_sum();
        grads.push(d.scale(mu));
    }
    Ok((value, grads))
}

/// Diagonal Fisher estimate anchored at the parameters it was computed at.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherDiag {
    pub fisher: Vec<Tensor2>,
    pub anchor: Vec<Tensor2>,
}

/// Averages squared per-sample gradients.
pub fn fisher_estimate<I>(anchor: Vec<Tensor2>, per_sample_grads: I) -> Result<FisherDiag>
where
    I: IntoIterator<Item = Result<Vec<Tensor2>>>,
{
    let mut fisher: Vec<Tensor2> = anchor
        .iter()
        .map(|a| Tensor2::zeros(a.rows(), a.cols()))
        .collect();
    let mut n = 0usize;
    for grads in per_sample_grads {
        let grads = grads?;
        if grads.len() != fisher.len() {
            return Err(crate::error::dim_err("fisher_estimate", "gradient count".into()));
        }
        for (f, g) in fisher.iter_mut().zip(&grads) {
            f.add_scaled_assign(&g.map(|v| v * v), 1.0)?;
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::Validation("Fisher estimate needs at least one sample".into()));
    }
    let inv = 1.0 / n as f64;
    Ok(FisherDiag {
        fisher: fisher.into_iter().map(|f| f.scale(inv)).collect(),
        anchor,
    })
}

/// `lambda * sum_k sum_j F_k[j] (theta[j] - anchor_k[j])^2` over all stored
/// estimates.
pub fn ewc_penalty(params: &[Tensor2], fishers: &[FisherDiag], lambda: f64) -> Result<(f64, Vec<Tensor2>)> {
    let mut grads: Vec<Tensor2> = params
        .iter()
        .map(|p| Tensor2::zeros(p.rows(), p.cols()))
        .collect();
    let mut value = 0.0;
    for fd in fishers {
        if fd.fisher.len() != params.len() {
            return Err(crate::error::dim_err("ewc_penalty", "tensor count".into()));
        }
        for ((p, (f, a)), g) in params.iter().zip(fd.fisher.iter().zip(&fd.anchor)).zip(grads.iter_mut()) {
            p.check_same("ewc_penalty", f)?;
            for (((pv, fv), av), gv) in p.data().iter().zip(f.data()).zip(a.data()).zip(g.data_mut()) {
                let d = pv - av;
                value += lambda * fv * d * d;
                *gv += 2.0 * lambda * fv * d;
            }
        }
    }
    Ok((value, grads))
}

/// Empirical Fisher of a dense model's shared parameters over the listed
/// samples of `task`.
pub fn dense_fisher(
    model: &DenseClientModel,
    task: usize,
    x: &Tensor2,
    labels: &[usize],
    samples: &[usize],
) -> Result<FisherDiag> {
    let grads = samples.iter().map(|&i| {
        let xi = x.gather_rows(&[i]);
        model.cross_entropy(task, &xi, &labels[i..=i]).map(|(_, g)| g.shared())
    });
    fisher_estimate(model.shared_params(), grads)
}

/// Baseline objective: cross-entropy plus the proximal and EWC terms the
/// method calls for.
pub fn dense_loss(
    model: &DenseClientModel,
    task: usize,
    x: &Tensor2,
    labels: &[usize],
    cfg: &ObjectiveConfig,
    global: Option<&[Tensor2]>,
    fishers: &[FisherDiag],
) -> Result<(f64, DenseGrads)> {
    if cfg.method == Method::FedWeit {
        return Err(Error::Validation("dense objective requested for fedweit".into()));
    }
    let (mut total, mut grads) = model.cross_entropy(task, x, labels)?;
    let shared = model.shared_params();
    let mut extra: Vec<Tensor2> = shared.iter().map(|p| Tensor2::zeros(p.rows(), p.cols())).collect();
    if cfg.method.uses_proximal() && cfg.prox > 0.0 {
        if let Some(global) = global {
            let (v, g) = fedprox_penalty(&shared, global, cfg.prox)?;
            total += v;
            for (e, gi) in extra.iter_mut().zip(&g) {
                e.add_scaled_assign(gi, 1.0)?;
            }
        }
    }
    if cfg.method.uses_ewc() && cfg.ewc > 0.0 && !fishers.is_empty() {
        let (v, g) = ewc_penalty(&shared, fishers, cfg.ewc)?;
        total += v;
        for (e, gi) in extra.iter_mut().zip(&g) {
            e.add_scaled_assign(gi, 1.0)?;
        }
    }
    grads.add_shared(&extra)?;
    Ok((total, grads))
}
