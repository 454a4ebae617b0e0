//! Client-side network parameterizations.
//!
//! Both model families share a [`ModelSpec`]: a stack of fully connected
//! layers described by a [`LayerSpec`], optionally followed by a per-task
//! classifier [`Head`]. When a head is present every stacked layer is
//! followed by a ReLU; otherwise the last stacked layer produces logits.

mod decomposed;
mod dense;

pub use decomposed::{DecomposedClientModel, DecomposedGrads, ForwardTrace, KbItem};
pub use dense::{DenseClientModel, DenseGrads};

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tensor1, Tensor2};

/// Widths of a fully connected stack: `dims[0]` inputs, `dims[l + 1]`
/// outputs of layer `l`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    dims: Vec<usize>,
}

impl LayerSpec {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Validation("a layer stack needs at least an input and an output width".into()));
        }
        if dims.contains(&0) {
            return Err(Error::Validation("layer widths must be positive".into()));
        }
        Ok(Self {
            dims: dims.to_vec(),
        })
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn in_dim(&self, layer: usize) -> usize {
        self.dims[layer]
    }

    pub fn out_dim(&self, layer: usize) -> usize {
        self.dims[layer + 1]
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        self.dims[self.dims.len() - 1]
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    /// Number of weight entries (biases excluded).
    pub fn weight_count(&self) -> usize {
        self.dims.windows(2).map(|w| w[0] * w[1]).sum()
    }

    pub(crate) fn check_weights(&self, what: &'static str, tensors: &[Tensor2]) -> Result<()> {
        if tensors.len() != self.num_layers()
            || tensors
                .iter()
                .zip(self.shapes())
                .any(|(t, s)| t.shape() != s)
        {
            return Err(crate::error::dim_err(
                what,
                format!("tensors do not match layer dims {:?}", self.dims),
            ));
        }
        Ok(())
    }
}

/// Network layout shared by a client's tasks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub layers: LayerSpec,
    /// Classes of the per-task head, if the network is multi-headed.
    pub head_classes: Option<usize>,
}

impl ModelSpec {
    pub fn new(layers: LayerSpec, head_classes: Option<usize>) -> Result<Self> {
        if head_classes == Some(0) {
            return Err(Error::Validation("head needs at least one class".into()));
        }
        Ok(Self {
            layers,
            head_classes,
        })
    }

    /// Single-headed MLP `dims[0] -> ... -> dims[last]`.
    pub fn plain(dims: &[usize]) -> Result<Self> {
        Self::new(LayerSpec::new(dims)?, None)
    }

    /// Hidden stack `dims` followed by a per-task head of `classes` outputs.
    pub fn multi_head(dims: &[usize], classes: usize) -> Result<Self> {
        Self::new(LayerSpec::new(dims)?, Some(classes))
    }

    pub fn classes(&self) -> usize {
        self.head_classes.unwrap_or_else(|| self.layers.output_dim())
    }

    pub(crate) fn relu_after(&self, layer: usize) -> bool {
        self.head_classes.is_some() || layer + 1 < self.layers.num_layers()
    }
}

/// Per-task classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub weight: Tensor2,
    pub bias: Tensor1,
}

impl Head {
    pub fn zeros(inputs: usize, classes: usize) -> Self {
        Self {
            weight: Tensor2::zeros(inputs, classes),
            bias: Tensor1::zeros(classes),
        }
    }
}

/// Draws shared starting weights `U(-1/sqrt(in), 1/sqrt(in))` with zero
/// biases.
pub fn init_shared<R: Rng>(layers: &LayerSpec, rng: &mut R) -> (Vec<Tensor2>, Vec<Tensor1>) {
    let mut weights = Vec::with_capacity(layers.num_layers());
    let mut biases = Vec::with_capacity(layers.num_layers());
    for (rows, cols) in layers.shapes() {
        let bound = 1.0 / libm::sqrt(rows as f64);
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        weights.push(Tensor2::new(rows, cols, data).expect("shape matches data"));
        biases.push(Tensor1::zeros(cols));
    }
    (weights, biases)
}

/// Fraction of rows whose arg-max (lowest index on ties) equals the label.
pub fn accuracy(logits: &Tensor2, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|(r, &label)| argmax(logits.row(*r)) == label)
        .count();
    hits as f64 / labels.len() as f64
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Inference without a tape.
pub(crate) fn plain_forward(
    spec: &ModelSpec,
    weights: &[Tensor2],
    biases: &[Tensor1],
    head: Option<&Head>,
    x: &Tensor2,
) -> Result<Tensor2> {
    let mut h = x.clone();
    for (l, (w, b)) in weights.iter().zip(biases).enumerate() {
        h = h.matmul(w)?.add_row(b.data())?;
        if spec.relu_after(l) {
            h = h.map(|v| if v > 0.0 { v } else { 0.0 });
        }
    }
    if let Some(head) = head {
        h = h.matmul(&head.weight)?.add_row(head.bias.data())?;
    }
    Ok(h)
}
