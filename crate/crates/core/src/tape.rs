//! Reverse-mode differentiation over [`Tensor2`] values.
//!
//! A [`Tape`] records every primitive in the order it is applied. Calling
//! [`Tape::backward`] on a scalar node walks the record in exact reverse
//! order and returns a [`Gradients`] table covering every node, leaves
//! included. Tapes are cheap and meant to be rebuilt for each minibatch.
//!
//! Vectors live on the tape as single-row matrices.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{dim_err, Error, Result};
use crate::tensor::{Tensor1, Tensor2};

static NEXT_TAPE_ID: AtomicUsize = AtomicUsize::new(1);

/// Handle to a value recorded on a particular tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: usize,
    index: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    ColScale(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Relu(usize),
    Scale(usize, f64),
    ScaleBy(usize, usize),
    Sum(usize),
    SoftmaxCe {
        logits: usize,
        labels: Vec<usize>,
        probs: Tensor2,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor2,
    op: Op,
}

/// Ordered record of primitive operations.
#[derive(Debug)]
pub struct Tape {
    id: usize,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor2, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Usage("variable does not belong to this tape".into()));
        }
        Ok(v.index)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor2> {
        Ok(&self.nodes[self.idx(v)?].value)
    }

    pub fn leaf(&mut self, value: Tensor2) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn leaf_vector(&mut self, value: &Tensor1) -> Var {
        self.push(value.to_row(), Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let out = self.nodes[ia].value.matmul(&self.nodes[ib].value)?;
        Ok(self.push(out, Op::MatMul(ia, ib)))
    }

    /// `out[i][j] = w[i][j] * s[j]` where `s` is a row vector.
    pub fn col_scale(&mut self, w: Var, s: Var) -> Result<Var> {
        let (iw, is) = (self.idx(w)?, self.idx(s)?);
        if self.nodes[is].value.rows() != 1 {
            return Err(dim_err("col_scale", "scale must be a row vector".into()));
        }
        let out = self.nodes[iw].value.col_scale(self.nodes[is].value.data())?;
        Ok(self.push(out, Op::ColScale(iw, is)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let out = self.nodes[ia].value.add(&self.nodes[ib].value)?;
        Ok(self.push(out, Op::Add(ia, ib)))
    }

    /// Broadcast-adds a row vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (ix, ib) = (self.idx(x)?, self.idx(bias)?);
        if self.nodes[ib].value.rows() != 1 {
            return Err(dim_err("add_row", "bias must be a row vector".into()));
        }
        let out = self.nodes[ix].value.add_row(self.nodes[ib].value.data())?;
        Ok(self.push(out, Op::AddRow(ix, ib)))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let out = self.nodes[ix].value.map(|v| if v > 0.0 { v } else { 0.0 });
        Ok(self.push(out, Op::Relu(ix)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let ix = self.idx(x)?;
        let out = self.nodes[ix].value.scale(factor);
        Ok(self.push(out, Op::Scale(ix, factor)))
    }

    /// Multiplies a tensor by a 1x1 node.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let (ix, is) = (self.idx(x)?, self.idx(s)?);
        if self.nodes[is].value.shape() != (1, 1) {
            return Err(dim_err("scale_by", "scale must be 1x1".into()));
        }
        let factor = self.nodes[is].value.data()[0];
        let out = self.nodes[ix].value.scale(factor);
        Ok(self.push(out, Op::ScaleBy(ix, is)))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let out = Tensor2::scalar(self.nodes[ix].value.sum());
        Ok(self.push(out, Op::Sum(ix)))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let il = self.idx(logits)?;
        let value = &self.nodes[il].value;
        if labels.len() != value.rows() || value.rows() == 0 {
            return Err(dim_err(
                "softmax_cross_entropy",
                format!("{} labels for {} rows", labels.len(), value.rows()),
            ));
        }
        let classes = value.cols();
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Validation(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let (loss, probs) = softmax_ce_forward(value, labels);
        let labels = labels.to_vec();
        Ok(self.push(
            Tensor2::scalar(loss),
            Op::SoftmaxCe {
                logits: il,
                labels,
                probs,
            },
        ))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let il = self.idx(loss)?;
        if self.nodes[il].value.shape() != (1, 1) {
            return Err(Error::Usage("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Option<Tensor2>> = vec![None; self.nodes.len()];
        grads[il] = Some(Tensor2::scalar(1.0));
        for i in (0..=il).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let da = g.matmul_t(&self.nodes[*b].value)?;
                    let db = self.nodes[*a].value.t_matmul(&g)?;
                    accumulate(&mut grads, *a, da)?;
                    accumulate(&mut grads, *b, db)?;
                }
                Op::ColScale(w, s) => {
                    let wv = &self.nodes[*w].value;
                    let sv = &self.nodes[*s].value;
                    let dw = g.col_scale(sv.data())?;
                    let mut ds = vec![0.0; wv.cols()];
                    for r in 0..wv.rows() {
                        for (c, d) in ds.iter_mut().enumerate() {
                            *d += g.get(r, c) * wv.get(r, c);
                        }
                    }
                    accumulate(&mut grads, *w, dw)?;
                    accumulate(&mut grads, *s, Tensor2::new(1, ds.len(), ds)?)?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g)?;
                }
                Op::AddRow(x, b) => {
                    let mut db = vec![0.0; g.cols()];
                    for r in 0..g.rows() {
                        for (d, v) in db.iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads, *b, Tensor2::new(1, db.len(), db)?)?;
                    accumulate(&mut grads, *x, g)?;
                }
                Op::Relu(x) => {
                    let xv = &self.nodes[*x].value;
                    let mut dx = g;
                    for (d, &v) in dx.data_mut().iter_mut().zip(xv.data()) {
                        if v <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::Scale(x, factor) => {
                    accumulate(&mut grads, *x, g.scale(*factor))?;
                }
                Op::ScaleBy(x, s) => {
                    let factor = self.nodes[*s].value.data()[0];
                    let ds = g.frobenius(&self.nodes[*x].value)?;
                    accumulate(&mut grads, *x, g.scale(factor))?;
                    accumulate(&mut grads, *s, Tensor2::scalar(ds))?;
                }
                Op::Sum(x) => {
                    let (r, c) = self.nodes[*x].value.shape();
                    let up = g.data()[0];
                    accumulate(&mut grads, *x, Tensor2::new(r, c, vec![up; r * c])?)?;
                }
                Op::SoftmaxCe {
                    logits,
                    labels,
                    probs,
                } => {
                    let up = g.data()[0];
                    let n = labels.len() as f64;
                    let mut d = probs.clone();
                    for (r, &l) in labels.iter().enumerate() {
                        let v = d.get(r, l);
                        d.set(r, l, v - 1.0);
                    }
                    accumulate(&mut grads, *logits, d.scale(up / n))?;
                }
            }
        }
        Ok(Gradients {
            tape: self.id,
            grads: self.collect_leaf_grads(grads),
        })
    }

    fn collect_leaf_grads(&self, grads: Vec<Option<Tensor2>>) -> Vec<Option<Tensor2>> {
        grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| match (&n.op, g) {
                (Op::Leaf, Some(g)) if g.shape() == n.value.shape() => Some(g),
                _ => None,
            })
            .collect()
    }
}

fn accumulate(grads: &mut [Option<Tensor2>], index: usize, g: Tensor2) -> Result<()> {
    match &mut grads[index] {
        Some(existing) => existing.add_scaled_assign(&g, 1.0),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// Gradients of a scalar with respect to the leaves of one tape.
#[derive(Debug, Clone)]
pub struct Gradients {
    tape: usize,
    grads: Vec<Option<Tensor2>>,
}

impl Gradients {
    /// Gradient for a leaf; `None` if the leaf did not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor2> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(Option::as_ref)
    }

    /// Gradient for a leaf, zero-filled if it did not influence the loss.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Result<Tensor2> {
        let value = tape.value(v)?;
        Ok(self
            .get(v)
            .cloned()
            .unwrap_or_else(|| Tensor2::zeros(value.rows(), value.cols())))
    }
}

/// Returns the mean cross-entropy and the row-wise softmax probabilities.
pub(crate) fn softmax_ce_forward(logits: &Tensor2, labels: &[usize]) -> (f64, Tensor2) {
    let mut probs = Tensor2::zeros(logits.rows(), logits.cols());
    let mut total = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| libm::exp(v - max)).sum();
        let log_z = max + libm::log(sum);
        total += log_z - row[label];
        for (c, v) in row.iter().enumerate() {
            probs.set(r, c, libm::exp(v - log_z));
        }
    }
    (total / labels.len() as f64, probs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor2 {
        Tensor2::from_rows(rows).unwrap()
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[&[1.0, -2.0], &[3.0, 0.5]]));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn col_scale_gradient_wrt_scale_is_column_sum() {
        let mut tape = Tape::new();
        let w = tape.leaf(t(&[&[1.0, 2.0], &[3.0, 4.0], &[-1.0, 0.5]]));
        let s = tape.leaf(t(&[&[0.3, -2.0]]));
        let y = tape.col_scale(w, s).unwrap();
        let l = tape.sum(y).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(s).unwrap().data(), &[3.0, 6.5]);
        assert_eq!(g.get(w).unwrap().data(), &[0.3, -2.0, 0.3, -2.0, 0.3, -2.0]);
    }

    #[test]
    fn relu_values_and_zero_subgradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[&[-1.0, 0.0, 2.0]]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).unwrap().data(), &[0.0, 0.0, 2.0]);
        let l = tape.sum(y).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn uniform_logits_give_log_k() {
        for k in [2usize, 5, 7] {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor2::new(3, k, vec![0.7; 3 * k]).unwrap());
            let l = tape.softmax_cross_entropy(x, &[0, k - 1, 1]).unwrap();
            let v = tape.value(l).unwrap().data()[0];
            assert!((v - libm::log(k as f64)).abs() < 1e-15);
        }
    }

    #[test]
    fn label_out_of_range_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor2::zeros(1, 3));
        assert!(matches!(
            tape.softmax_cross_entropy(x, &[3]),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn foreign_loss_is_usage_error() {
        let mut a = Tape::new();
        let mut b = Tape::new();
        let x = b.leaf(Tensor2::scalar(1.0));
        let _ = a.leaf(Tensor2::scalar(1.0));
        assert!(matches!(a.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn non_scalar_loss_is_usage_error() {
        let mut a = Tape::new();
        let x = a.leaf(Tensor2::zeros(2, 2));
        assert!(matches!(a.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn scale_by_routes_to_both_operands() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[&[1.0, 2.0]]));
        let s = tape.leaf(Tensor2::scalar(3.0));
        let y = tape.scale_by(x, s).unwrap();
        let l = tape.sum(y).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 3.0]);
        assert_eq!(g.get(s).unwrap().data(), &[3.0]);
    }
}
