//! Undecomposed MLP used by the baseline methods: shared weights plus a
//! frozen-after-use head per task.

use alloc::format;
use alloc::vec::Vec;

use super::{plain_forward, Head, ModelSpec};
use crate::error::{dim_err, Error, Result};
use crate::tape::Tape;
use crate::tensor::{Tensor1, Tensor2};

#[derive(Debug, Clone)]
pub struct DenseClientModel {
    client: u32,
    spec: ModelSpec,
    weights: Vec<Tensor2>,
    biases: Vec<Tensor1>,
    heads: Vec<Head>,
    in_progress: bool,
}

/// Gradients of the shared stack and the current head.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrads {
    pub weights: Vec<Tensor2>,
    pub biases: Vec<Tensor1>,
    pub head: Option<Head>,
}

impl DenseGrads {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.weights.iter().for_each(|t| out.extend_from_slice(t.data()));
        self.biases.iter().for_each(|t| out.extend_from_slice(t.data()));
        if let Some(h) = &self.head {
            out.extend_from_slice(h.weight.data());
            out.extend_from_slice(h.bias.data());
        }
        out
    }

    /// Shared gradients in [`DenseClientModel::shared_params`] layout.
    pub fn shared(&self) -> Vec<Tensor2> {
        interleave(&self.weights, &self.biases)
    }

    /// Adds gradients given in shared-parameter layout.
    pub fn add_shared(&mut self, extra: &[Tensor2]) -> Result<()> {
        for (l, w) in self.weights.iter_mut().enumerate() {
            w.add_scaled_assign(&extra[2 * l], 1.0)?;
            for (b, e) in self.biases[l].data_mut().iter_mut().zip(extra[2 * l + 1].data()) {
                *b += e;
            }
        }
        Ok(())
    }
}

fn interleave(weights: &[Tensor2], biases: &[Tensor1]) -> Vec<Tensor2> {
    weights
        .iter()
        .zip(biases)
        .flat_map(|(w, b)| [w.clone(), b.to_row()])
        .collect()
}

impl DenseClientModel {
    pub fn new(client: u32, spec: ModelSpec, weights: Vec<Tensor2>, biases: Vec<Tensor1>) -> Result<Self> {
        spec.layers.check_weights("DenseClientModel::new", &weights)?;
        if biases.len() != weights.len() || biases.iter().zip(&weights).any(|(b, w)| b.len() != w.cols()) {
            return Err(dim_err("DenseClientModel::new", "bias widths".into()));
        }
        Ok(Self {
            client,
            spec,
            weights,
            biases,
            heads: Vec::new(),
            in_progress: false,
        })
    }

    pub fn client(&self) -> u32 {
        self.client
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn num_tasks(&self) -> usize {
        self.heads.len().max(usize::from(self.in_progress))
    }

    pub fn current_task(&self) -> Option<usize> {
        self.in_progress.then(|| self.heads.len().saturating_sub(1))
    }

    pub fn begin_task(&mut self) -> Result<usize> {
        if self.in_progress {
            return Err(Error::State(format!("client {} is mid-task", self.client)));
        }
        let inputs = self.spec.layers.output_dim();
        let classes = self.spec.head_classes.unwrap_or(0);
        self.heads.push(Head::zeros(inputs, classes));
        self.in_progress = true;
        Ok(self.heads.len() - 1)
    }

    pub fn finish_task(&mut self) -> Result<usize> {
        let t = self
            .current_task()
            .ok_or_else(|| Error::State("no task in progress".into()))?;
        self.in_progress = false;
        Ok(t)
    }

    fn head(&self, task: usize) -> Result<Option<&Head>> {
        if task >= self.heads.len() {
            return Err(Error::State(format!("task {task} has not been allocated")));
        }
        Ok(self.spec.head_classes.map(|_| &self.heads[task]))
    }

    /// Shared parameters as `[W_0, b_0, W_1, b_1, ...]`, biases as rows.
    pub fn shared_params(&self) -> Vec<Tensor2> {
        interleave(&self.weights, &self.biases)
    }

    pub fn shared_shapes(&self) -> Vec<(usize, usize)> {
        self.spec
            .layers
            .shapes()
            .into_iter()
            .flat_map(|(r, c)| [(r, c), (1, c)])
            .collect()
    }

    pub fn set_shared_params(&mut self, params: &[Tensor2]) -> Result<()> {
        let shapes = self.shared_shapes();
        if params.len() != shapes.len() || params.iter().zip(&shapes).any(|(p, s)| p.shape() != *s) {
            return Err(dim_err("set_shared_params", "shape mismatch".into()));
        }
        for (l, w) in self.weights.iter_mut().enumerate() {
            *w = params[2 * l].clone();
            self.biases[l] = params[2 * l + 1].to_vector();
        }
        Ok(())
    }

    pub fn predict(&self, task: usize, x: &Tensor2) -> Result<Tensor2> {
        plain_forward(&self.spec, &self.weights, &self.biases, self.head(task)?, x)
    }

    /// Mean cross-entropy of `task` on a batch with gradients for the shared
    /// stack and the task's head.
    pub fn cross_entropy(&self, task: usize, x: &Tensor2, labels: &[usize]) -> Result<(f64, DenseGrads)> {
        if x.cols() != self.spec.layers.input_dim() {
            return Err(dim_err("cross_entropy", format!("input width {}", x.cols())));
        }
        let head = self.head(task)?;
        let mut tape = Tape::new();
        let mut h = tape.leaf(x.clone());
        let mut wv = Vec::new();
        let mut bv = Vec::new();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let w = tape.leaf(w.clone());
            let b = tape.leaf_vector(b);
            h = tape.matmul(h, w)?;
            h = tape.add_row(h, b)?;
            if self.spec.relu_after(l) {
                h = tape.relu(h)?;
            }
            wv.push(w);
            bv.push(b);
        }
        let head_vars = match head {
            Some(hd) => {
                let w = tape.leaf(hd.weight.clone());
                let b = tape.leaf_vector(&hd.bias);
                h = tape.matmul(h, w)?;
                h = tape.add_row(h, b)?;
                Some((w, b))
            }
            None => None,
        };
        let loss = tape.softmax_cross_entropy(h, labels)?;
        let value = tape.value(loss)?.data()[0];
        let g = tape.backward(loss)?;
        let weights = wv.iter().map(|&v| g.wrt(&tape, v)).collect::<Result<Vec<_>>>()?;
        let biases = bv
            .iter()
            .map(|&v| g.wrt(&tape, v).map(|t| t.to_vector()))
            .collect::<Result<Vec<_>>>()?;
        let head = match head_vars {
            Some((w, b)) => Some(Head {
                weight: g.wrt(&tape, w)?,
                bias: g.wrt(&tape, b)?.to_vector(),
            }),
            None => None,
        };
        Ok((value, DenseGrads { weights, biases, head }))
    }

    /// Shared weights, biases and the current head, flattened.
    pub fn trainable_flat(&self, task: usize) -> Result<Vec<f64>> {
        self.check_current(task)?;
        let mut out = Vec::new();
        self.weights.iter().for_each(|t| out.extend_from_slice(t.data()));
        self.biases.iter().for_each(|t| out.extend_from_slice(t.data()));
        if self.spec.head_classes.is_some() {
            out.extend_from_slice(self.heads[task].weight.data());
            out.extend_from_slice(self.heads[task].bias.data());
        }
        Ok(out)
    }

    pub fn set_trainable_flat(&mut self, task: usize, values: &[f64]) -> Result<()> {
        let n = self.trainable_flat(task)?.len();
        if values.len() != n {
            return Err(dim_err("set_trainable_flat", format!("{} values for {n}", values.len())));
        }
        let mut rest = values;
        let mut take = |dst: &mut [f64]| {
            let (head, tail) = rest.split_at(dst.len());
            dst.copy_from_slice(head);
            rest = tail;
        };
        self.weights.iter_mut().for_each(|t| take(t.data_mut()));
        self.biases.iter_mut().for_each(|t| take(t.data_mut()));
        if self.spec.head_classes.is_some() {
            take(self.heads[task].weight.data_mut());
            take(self.heads[task].bias.data_mut());
        }
        Ok(())
    }

    fn check_current(&self, task: usize) -> Result<()> {
        if self.current_task() != Some(task) {
            return Err(Error::State(format!("task {task} is not in progress")));
        }
        Ok(())
    }
}
