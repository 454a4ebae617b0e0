//! Per-client decomposed parameters.
//!
//! Every stacked layer of task `t` uses the effective weight
//!
//! ```text
//! theta_l = B_l * diag(m_l[t]) + A_l[t] + sum_k alpha[t][k] * K_l[k]
//! ```
//!
//! where `B` is the client's base (shared across its tasks), `m[t]` a mask
//! over the layer's output units, `A[t]` the task-adaptive weights and `K[k]`
//! read-only adaptive weights received from other clients. Biases are shared
//! across tasks and undecomposed; the optional head is per task.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use super::{plain_forward, Head, ModelSpec};
use crate::error::{dim_err, Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Tensor1, Tensor2};

/// Foreign task-adaptive weights, one tensor per stacked layer.
#[derive(Debug, Clone, PartialEq)]
pub struct KbItem {
    origin_client: u32,
    origin_task: u32,
    tensors: Vec<Tensor2>,
}

impl KbItem {
    pub fn new(origin_client: u32, origin_task: u32, tensors: Vec<Tensor2>) -> Self {
        Self {
            origin_client,
            origin_task,
            tensors,
        }
    }

    pub fn origin_client(&self) -> u32 {
        self.origin_client
    }

    pub fn origin_task(&self) -> u32 {
        self.origin_task
    }

    pub fn tensors(&self) -> &[Tensor2] {
        &self.tensors
    }
}

#[derive(Debug, Clone)]
struct TaskRecord {
    mask: Vec<Tensor1>,
    adaptive: Vec<Tensor2>,
    /// Value of `adaptive` at the start of the current task.
    adaptive_boundary: Vec<Tensor2>,
    attention: Vec<f64>,
    kb: Vec<Arc<KbItem>>,
    head: Option<Head>,
    finished: bool,
}

/// A client's base, biases and per-task decomposition records.
#[derive(Debug, Clone)]
pub struct DecomposedClientModel {
    client: u32,
    spec: ModelSpec,
    base: Vec<Tensor2>,
    bias: Vec<Tensor1>,
    base_snapshot: Vec<Tensor2>,
    tasks: Vec<TaskRecord>,
}

/// Gradients for every trainable piece of the current task.
#[derive(Debug, Clone, PartialEq)]
pub struct DecomposedGrads {
    pub base: Vec<Tensor2>,
    pub bias: Vec<Tensor1>,
    pub mask: Vec<Tensor1>,
    /// `adaptive[i][l]` for tasks `0..=t`.
    pub adaptive: Vec<Vec<Tensor2>>,
    pub attention: Vec<f64>,
    pub head: Option<Head>,
}

impl DecomposedGrads {
    pub fn zeros_like(model: &DecomposedClientModel, task: usize) -> Result<Self> {
        let rec = model.record(task)?;
        let zeros_w = || -> Vec<Tensor2> {
            model
                .base
                .iter()
                .map(|b| Tensor2::zeros(b.rows(), b.cols()))
                .collect()
        };
        Ok(Self {
            base: zeros_w(),
            bias: model.bias.iter().map(|b| Tensor1::zeros(b.len())).collect(),
            mask: rec.mask.iter().map(|m| Tensor1::zeros(m.len())).collect(),
            adaptive: (0..=task).map(|_| zeros_w()).collect(),
            attention: vec![0.0; rec.attention.len()],
            head: rec
                .head
                .as_ref()
                .map(|h| Head::zeros(h.weight.rows(), h.weight.cols())),
        })
    }

    /// Flattens in the same order as
    /// [`DecomposedClientModel::trainable_flat`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.base.iter().for_each(|t| out.extend_from_slice(t.data()));
        self.bias.iter().for_each(|t| out.extend_from_slice(t.data()));
        self.mask.iter().for_each(|t| out.extend_from_slice(t.data()));
        for task in &self.adaptive {
            task.iter().for_each(|t| out.extend_from_slice(t.data()));
        }
        out.extend_from_slice(&self.attention);
        if let Some(h) = &self.head {
            out.extend_from_slice(h.weight.data());
            out.extend_from_slice(h.bias.data());
        }
        out
    }
}

/// Tape handles produced by [`DecomposedClientModel::forward_composed`].
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub logits: Var,
    pub theta: Vec<Var>,
    pub bias: Vec<Var>,
    pub head: Option<(Var, Var)>,
}

impl DecomposedClientModel {
    pub fn new(client: u32, spec: ModelSpec, base: Vec<Tensor2>, bias: Vec<Tensor1>) -> Result<Self> {
        spec.layers.check_weights("DecomposedClientModel::new", &base)?;
        if bias.len() != base.len() || bias.iter().zip(&base).any(|(b, w)| b.len() != w.cols()) {
            return Err(dim_err("DecomposedClientModel::new", "bias widths".into()));
        }
        let base_snapshot = base.clone();
        Ok(Self {
            client,
            spec,
            base,
            bias,
            base_snapshot,
            tasks: Vec::new(),
        })
    }

    pub fn client(&self) -> u32 {
        self.client
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn base(&self) -> &[Tensor2] {
        &self.base
    }

    pub fn base_mut(&mut self) -> &mut [Tensor2] {
        &mut self.base
    }

    pub fn bias(&self) -> &[Tensor1] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [Tensor1] {
        &mut self.bias
    }

    pub fn base_snapshot(&self) -> &[Tensor2] {
        &self.base_snapshot
    }

    /// Number of tasks allocated so far.
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// Index of the task being trained, if any.
    pub fn current_task(&self) -> Option<usize> {
        match self.tasks.last() {
            Some(r) if !r.finished => Some(self.tasks.len() - 1),
            _ => None,
        }
    }

    fn record(&self, task: usize) -> Result<&TaskRecord> {
        self.tasks
            .get(task)
            .ok_or_else(|| Error::State(format!("task {task} has not been allocated")))
    }

    fn current_record_mut(&mut self, task: usize) -> Result<&mut TaskRecord> {
        if self.current_task() != Some(task) {
            return Err(Error::State(format!("task {task} is not the task in progress")));
        }
        Ok(&mut self.tasks[task])
    }

    /// Opens a new task: zero adaptive weights, all-ones mask, uniform
    /// attention over `kb_items`, and a fresh base/adaptive snapshot.
    pub fn allocate_task(&mut self, kb_items: Vec<Arc<KbItem>>) -> Result<usize> {
        if self.current_task().is_some() {
            return Err(Error::State(format!(
                "client {} is still training task {}",
                self.client,
                self.tasks.len() - 1
            )));
        }
        for item in &kb_items {
            if item.origin_client == self.client {
                return Err(Error::Validation(format!(
                    "client {} received its own adaptive weights",
                    self.client
                )));
            }
            self.spec.layers.check_weights("allocate_task", &item.tensors)?;
        }
        self.base_snapshot = self.base.clone();
        for rec in &mut self.tasks {
            rec.adaptive_boundary = rec.adaptive.clone();
        }
        let n = kb_items.len();
        let adaptive: Vec<Tensor2> = self
            .base
            .iter()
            .map(|b| Tensor2::zeros(b.rows(), b.cols()))
            .collect();
        self.tasks.push(TaskRecord {
            mask: self.base.iter().map(|b| Tensor1::filled(b.cols(), 1.0)).collect(),
            adaptive_boundary: adaptive.clone(),
            adaptive,
            attention: vec![1.0 / n as f64; n],
            kb: kb_items,
            head: self
                .spec
                .head_classes
                .map(|k| Head::zeros(self.spec.layers.output_dim(), k)),
            finished: false,
        });
        Ok(self.tasks.len() - 1)
    }

    /// Closes the task in progress; its mask, attention and head freeze.
    pub fn finish_task(&mut self) -> Result<usize> {
        let t = self
            .current_task()
            .ok_or_else(|| Error::State("no task in progress".into()))?;
        self.tasks[t].finished = true;
        Ok(t)
    }

    pub fn mask(&self, task: usize) -> Result<&[Tensor1]> {
        Ok(&self.record(task)?.mask)
    }

    pub fn adaptive(&self, task: usize) -> Result<&[Tensor2]> {
        Ok(&self.record(task)?.adaptive)
    }

    pub fn adaptive_boundary(&self, task: usize) -> Result<&[Tensor2]> {
        Ok(&self.record(task)?.adaptive_boundary)
    }

    pub fn attention(&self, task: usize) -> Result<&[f64]> {
        Ok(&self.record(task)?.attention)
    }

    pub fn kb_items(&self, task: usize) -> Result<&[Arc<KbItem>]> {
        Ok(&self.record(task)?.kb)
    }

    pub fn head(&self, task: usize) -> Result<Option<&Head>> {
        Ok(self.record(task)?.head.as_ref())
    }

    /// Only the mask of the task in progress is writable.
    pub fn mask_mut(&mut self, task: usize) -> Result<&mut [Tensor1]> {
        Ok(&mut self.current_record_mut(task)?.mask)
    }

    /// Adaptive weights of any allocated task (past ones stay trainable).
    pub fn adaptive_mut(&mut self, task: usize) -> Result<&mut [Tensor2]> {
        let len = self.tasks.len();
        self.tasks
            .get_mut(task)
            .map(|r| r.adaptive.as_mut_slice())
            .ok_or_else(|| Error::State(format!("task {task} of {len} not allocated")))
    }

    pub fn attention_mut(&mut self, task: usize) -> Result<&mut [f64]> {
        Ok(&mut self.current_record_mut(task)?.attention)
    }

    pub fn head_mut(&mut self, task: usize) -> Result<Option<&mut Head>> {
        Ok(self.current_record_mut(task)?.head.as_mut())
    }

    /// Effective per-layer weights of `task`.
    pub fn compose(&self, task: usize) -> Result<Vec<Tensor2>> {
        let rec = self.record(task)?;
        let mut out = Vec::with_capacity(self.base.len());
        for (l, base) in self.base.iter().enumerate() {
            let mut theta = base.col_scale(rec.mask[l].data())?;
            theta.add_scaled_assign(&rec.adaptive[l], 1.0)?;
            for (alpha, item) in rec.attention.iter().zip(&rec.kb) {
                theta.add_scaled_assign(&item.tensors[l], *alpha)?;
            }
            out.push(theta);
        }
        Ok(out)
    }

    /// Records the MLP over composed weights on `tape`. Composed weights,
    /// biases and the head enter as leaves; use
    /// [`route_gradients`](Self::route_gradients) to map `dtheta` back onto
    /// the decomposition.
    pub fn forward_composed(&self, tape: &mut Tape, task: usize, x: &Tensor2) -> Result<ForwardTrace> {
        if x.cols() != self.spec.layers.input_dim() {
            return Err(dim_err(
                "forward_composed",
                format!("{} features for input width {}", x.cols(), self.spec.layers.input_dim()),
            ));
        }
        let composed = self.compose(task)?;
        let rec = self.record(task)?;
        let mut h = tape.leaf(x.clone());
        let mut theta = Vec::with_capacity(composed.len());
        let mut bias = Vec::with_capacity(composed.len());
        for (l, w) in composed.into_iter().enumerate() {
            let w = tape.leaf(w);
            let b = tape.leaf_vector(&self.bias[l]);
            h = tape.matmul(h, w)?;
            h = tape.add_row(h, b)?;
            if self.spec.relu_after(l) {
                h = tape.relu(h)?;
            }
            theta.push(w);
            bias.push(b);
        }
        let head = match &rec.head {
            Some(head) => {
                let w = tape.leaf(head.weight.clone());
                let b = tape.leaf_vector(&head.bias);
                h = tape.matmul(h, w)?;
                h = tape.add_row(h, b)?;
                Some((w, b))
            }
            None => None,
        };
        Ok(ForwardTrace {
            logits: h,
            theta,
            bias,
            head,
        })
    }

    /// Logits for `task` without recording a tape.
    pub fn predict(&self, task: usize, x: &Tensor2) -> Result<Tensor2> {
        let composed = self.compose(task)?;
        plain_forward(&self.spec, &composed, &self.bias, self.record(task)?.head.as_ref(), x)
    }

    /// Chain rule from composed-weight gradients to the decomposition.
    ///
    /// Returns `(dB, dm, dA, dalpha)` for `task`; foreign items receive no
    /// gradient.
    pub fn route_gradients(
        &self,
        task: usize,
        dtheta: &[Tensor2],
    ) -> Result<(Vec<Tensor2>, Vec<Tensor1>, Vec<Tensor2>, Vec<f64>)> {
        let rec = self.record(task)?;
        self.spec.layers.check_weights("route_gradients", dtheta)?;
        let mut d_base = Vec::with_capacity(dtheta.len());
        let mut d_mask = Vec::with_capacity(dtheta.len());
        for (l, g) in dtheta.iter().enumerate() {
            d_base.push(g.col_scale(rec.mask[l].data())?);
            let b = &self.base[l];
            let mut dm = vec![0.0; b.cols()];
            for r in 0..b.rows() {
                for (c, d) in dm.iter_mut().enumerate() {
                    *d += g.get(r, c) * b.get(r, c);
                }
            }
            d_mask.push(Tensor1::new(dm));
        }
        let mut d_alpha = Vec::with_capacity(rec.kb.len());
        for item in &rec.kb {
            let mut s = 0.0;
            for (g, k) in dtheta.iter().zip(&item.tensors) {
                s += g.frobenius(k)?;
            }
            d_alpha.push(s);
        }
        Ok((d_base, d_mask, dtheta.to_vec(), d_alpha))
    }

    /// `B - B_snapshot` per layer.
    pub fn base_delta(&self) -> Result<Vec<Tensor2>> {
        self.base
            .iter()
            .zip(&self.base_snapshot)
            .map(|(b, s)| b.sub(s))
            .collect()
    }

    /// `A[i] - A[i]_boundary` per layer.
    pub fn adaptive_delta(&self, task: usize) -> Result<Vec<Tensor2>> {
        let rec = self.record(task)?;
        rec.adaptive
            .iter()
            .zip(&rec.adaptive_boundary)
            .map(|(a, s)| a.sub(s))
            .collect()
    }

    fn visit_trainable(&self, task: usize, mut f: impl FnMut(&[f64])) -> Result<()> {
        if self.current_task() != Some(task) {
            return Err(Error::State(format!("task {task} is not the task in progress")));
        }
        self.base.iter().for_each(|t| f(t.data()));
        self.bias.iter().for_each(|t| f(t.data()));
        self.tasks[task].mask.iter().for_each(|t| f(t.data()));
        for rec in &self.tasks[..=task] {
            rec.adaptive.iter().for_each(|t| f(t.data()));
        }
        f(&self.tasks[task].attention);
        if let Some(h) = &self.tasks[task].head {
            f(h.weight.data());
            f(h.bias.data());
        }
        Ok(())
    }

    fn visit_trainable_mut(&mut self, task: usize, mut f: impl FnMut(&mut [f64])) -> Result<()> {
        if self.current_task() != Some(task) {
            return Err(Error::State(format!("task {task} is not the task in progress")));
        }
        self.base.iter_mut().for_each(|t| f(t.data_mut()));
        self.bias.iter_mut().for_each(|t| f(t.data_mut()));
        let (past, current) = self.tasks.split_at_mut(task);
        let current = &mut current[0];
        current.mask.iter_mut().for_each(|t| f(t.data_mut()));
        for rec in past.iter_mut() {
            rec.adaptive.iter_mut().for_each(|t| f(t.data_mut()));
        }
        current.adaptive.iter_mut().for_each(|t| f(t.data_mut()));
        f(&mut current.attention);
        if let Some(h) = &mut current.head {
            f(h.weight.data_mut());
            f(h.bias.data_mut());
        }
        Ok(())
    }

    /// Every parameter optimized while training `task`, flattened: base,
    /// biases, current mask, adaptive weights of tasks `0..=task`,
    /// attention, then head weight and bias.
    pub fn trainable_flat(&self, task: usize) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        self.visit_trainable(task, |s| out.extend_from_slice(s))?;
        Ok(out)
    }

    pub fn set_trainable_flat(&mut self, task: usize, values: &[f64]) -> Result<()> {
        let expected = self.trainable_flat(task)?.len();
        if values.len() != expected {
            return Err(dim_err(
                "set_trainable_flat",
                format!("{} values for {expected} parameters", values.len()),
            ));
        }
        let mut offset = 0;
        self.visit_trainable_mut(task, |s| {
            s.copy_from_slice(&values[offset..offset + s.len()]);
            offset += s.len();
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LayerSpec;

    fn t(rows: &[&[f64]]) -> Tensor2 {
        Tensor2::from_rows(rows).unwrap()
    }

    fn single_layer(base: Tensor2) -> DecomposedClientModel {
        let spec = ModelSpec::new(LayerSpec::new(&[base.rows(), base.cols()]).unwrap(), None).unwrap();
        let bias = Tensor1::zeros(base.cols());
        DecomposedClientModel::new(0, spec, alloc::vec![base], alloc::vec![bias]).unwrap()
    }

    #[test]
    fn fresh_task_composes_to_base() {
        let b = t(&[&[1.0, -2.0], &[3.0, 4.5]]);
        let mut m = single_layer(b.clone());
        let task = m.allocate_task(Vec::new()).unwrap();
        assert!(m.attention(task).unwrap().is_empty());
        assert_eq!(m.compose(task).unwrap(), alloc::vec![b]);
    }

    #[test]
    fn compose_with_mask_and_adaptive() {
        let mut m = single_layer(t(&[&[1.0, 2.0], &[3.0, 4.0]]));
        m.allocate_task(Vec::new()).unwrap();
        m.mask_mut(0).unwrap()[0] = Tensor1::new(alloc::vec![1.0, 0.0]);
        m.adaptive_mut(0).unwrap()[0] = t(&[&[0.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(m.compose(0).unwrap()[0].data(), &[1.0, 0.0, 3.0, 1.0]);
    }

    #[test]
    fn compose_with_one_foreign_item() {
        let mut m = single_layer(Tensor2::zeros(2, 2));
        let item = Arc::new(KbItem::new(1, 0, alloc::vec![t(&[&[1.0, 1.0], &[1.0, 1.0]])]));
        m.allocate_task(alloc::vec![item]).unwrap();
        assert_eq!(m.attention(0).unwrap(), &[1.0]);
        m.attention_mut(0).unwrap()[0] = 0.5;
        assert_eq!(m.compose(0).unwrap()[0].data(), &[0.5; 4]);
    }

    #[test]
    fn attention_is_uniform_over_delivered_items() {
        let mut m = single_layer(Tensor2::zeros(1, 1));
        let items = (0..4)
            .map(|c| Arc::new(KbItem::new(c + 1, 0, alloc::vec![Tensor2::zeros(1, 1)])))
            .collect();
        m.allocate_task(items).unwrap();
        assert_eq!(m.attention(0).unwrap(), &[0.25; 4]);
    }

    #[test]
    fn allocation_rules() {
        let mut m = single_layer(Tensor2::zeros(1, 2));
        m.allocate_task(Vec::new()).unwrap();
        assert!(matches!(m.allocate_task(Vec::new()), Err(Error::State(_))));
        m.finish_task().unwrap();
        assert!(matches!(m.mask_mut(0), Err(Error::State(_))));
        assert!(matches!(m.compose(3), Err(Error::State(_))));
        let own = Arc::new(KbItem::new(0, 0, alloc::vec![Tensor2::zeros(1, 2)]));
        assert!(m.allocate_task(alloc::vec![own]).is_err());
    }

    #[test]
    fn base_delta_is_zero_right_after_allocation() {
        let mut m = single_layer(t(&[&[1.0, 2.0]]));
        m.allocate_task(Vec::new()).unwrap();
        m.base_mut()[0].set(0, 0, 5.0);
        m.finish_task().unwrap();
        m.allocate_task(Vec::new()).unwrap();
        assert!(m.base_delta().unwrap().iter().all(|d| d.abs_sum() == 0.0));
        assert_eq!(m.base_snapshot()[0].data(), &[5.0, 2.0]);
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let mut m = single_layer(t(&[&[1.0, 0.0], &[0.0, 1.0]]));
        m.allocate_task(Vec::new()).unwrap();
        let x = t(&[&[0.3, -0.7], &[2.0, 5.0]]);
        assert_eq!(m.predict(0, &x).unwrap(), x);
        let mut tape = Tape::new();
        let tr = m.forward_composed(&mut tape, 0, &x).unwrap();
        assert_eq!(tape.value(tr.logits).unwrap(), &x);
    }

    #[test]
    fn zero_input_yields_bias() {
        let mut m = single_layer(t(&[&[1.0, 2.0], &[3.0, 4.0]]));
        m.bias_mut()[0] = Tensor1::new(alloc::vec![0.5, -1.5]);
        m.allocate_task(Vec::new()).unwrap();
        let out = m.predict(0, &Tensor2::zeros(1, 2)).unwrap();
        assert_eq!(out.data(), &[0.5, -1.5]);
    }

    #[test]
    fn routing_cases() {
        let mut m = single_layer(t(&[&[1.0, 2.0]]));
        m.allocate_task(Vec::new()).unwrap();
        let (db, dm, da, dal) = m.route_gradients(0, &[t(&[&[1.0, 1.0]])]).unwrap();
        assert_eq!(dm[0].data(), &[1.0, 2.0]);
        assert_eq!(db[0].data(), &[1.0, 1.0]);
        assert_eq!(da[0].data(), &[1.0, 1.0]);
        assert!(dal.is_empty());
        let (db, dm, da, _) = m.route_gradients(0, &[Tensor2::zeros(1, 2)]).unwrap();
        assert_eq!(db[0].abs_sum() + dm[0].data().iter().map(|v| v.abs()).sum::<f64>() + da[0].abs_sum(), 0.0);
        assert!(m.route_gradients(0, &[Tensor2::zeros(2, 2)]).is_err());
    }

    #[test]
    fn flat_round_trip() {
        let spec = ModelSpec::multi_head(&[2, 3], 2).unwrap();
        let base = alloc::vec![t(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]])];
        let mut m = DecomposedClientModel::new(2, spec, base, alloc::vec![Tensor1::zeros(3)]).unwrap();
        m.allocate_task(Vec::new()).unwrap();
        let flat = m.trainable_flat(0).unwrap();
        // base 6 + bias 3 + mask 3 + adaptive 6 + head 3*2 + 2
        assert_eq!(flat.len(), 26);
        let shifted: Vec<f64> = flat.iter().map(|v| v + 1.0).collect();
        m.set_trainable_flat(0, &shifted).unwrap();
        assert_eq!(m.trainable_flat(0).unwrap(), shifted);
        assert_eq!(
            DecomposedGrads::zeros_like(&m, 0).unwrap().flatten().len(),
            flat.len()
        );
    }
}
