//! Transmitted parameter sets and their wire framing.
//!
//! Frame layout (little-endian):
//!
//! ```text
//! kind: u8 | layer_count: u16 | count[layer]: u32 ...
//! sparse kinds: per layer, `count` pairs of (flat index: u32, value: f32), strictly increasing index
//! dense kinds:  per layer, `count` values (f32) in row-major order
//! ```
//!
//! Layer shapes are not framed; the receiver supplies them. Values travel
//! as `f32`, so decoding yields `f32`-representable numbers.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum PayloadKind {
    /// Masked base `B * m` (plus shared biases).
    Base = 0,
    /// Task-adaptive weights.
    Adaptive = 1,
    /// Aggregated global parameter.
    Global = 2,
    /// Bundle of sampled knowledge-base items.
    Knowledge = 3,
    /// Full baseline model.
    DenseModel = 4,
    /// Full baseline global model.
    DenseGlobal = 5,
}

impl PayloadKind {
    pub const ALL: [PayloadKind; 6] = [
        PayloadKind::Base,
        PayloadKind::Adaptive,
        PayloadKind::Global,
        PayloadKind::Knowledge,
        PayloadKind::DenseModel,
        PayloadKind::DenseGlobal,
    ];

    pub fn is_dense(self) -> bool {
        matches!(self, PayloadKind::DenseModel | PayloadKind::DenseGlobal)
    }

    pub fn name(self) -> &'static str {
        match self {
            PayloadKind::Base => "base",
            PayloadKind::Adaptive => "adaptive",
            PayloadKind::Global => "global",
            PayloadKind::Knowledge => "kb",
            PayloadKind::DenseModel => "dense_model",
            PayloadKind::DenseGlobal => "dense_global",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    fn from_byte(b: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|k| *k as u8 == b)
    }
}

/// One tensor's transmitted entries, keyed by row-major flat index.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseLayer {
    pub rows: usize,
    pub cols: usize,
    pub entries: Vec<(u32, f64)>,
}

impl SparseLayer {
    pub fn to_dense(&self) -> Tensor2 {
        let mut t = Tensor2::zeros(self.rows, self.cols);
        for &(i, v) in &self.entries {
            t.data_mut()[i as usize] = v;
        }
        t
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparsePayload {
    pub kind: PayloadKind,
    pub layers: Vec<SparseLayer>,
}

/// Frame bytes per transmitted value.
pub const VALUE_BYTES: u64 = 4;
/// Frame bytes per sparse index.
pub const INDEX_BYTES: u64 = 4;

impl SparsePayload {
    /// Every entry of every tensor, zeros included (dense kinds).
    pub fn dense(kind: PayloadKind, tensors: &[Tensor2]) -> Self {
        Self {
            kind,
            layers: tensors
                .iter()
                .map(|t| SparseLayer {
                    rows: t.rows(),
                    cols: t.cols(),
                    entries: t.data().iter().enumerate().map(|(i, &v)| (i as u32, v)).collect(),
                })
                .collect(),
        }
    }

    /// Nonzero entries of every tensor.
    pub fn nonzeros_of(kind: PayloadKind, tensors: &[Tensor2]) -> Self {
        Self {
            kind,
            layers: tensors
                .iter()
                .map(|t| SparseLayer {
                    rows: t.rows(),
                    cols: t.cols(),
                    entries: t
                        .data()
                        .iter()
                        .enumerate()
                        .filter(|(_, v)| **v != 0.0)
                        .map(|(i, &v)| (i as u32, v))
                        .collect(),
                })
                .collect(),
        }
    }

    /// Number of transmitted values.
    pub fn nonzeros(&self) -> u64 {
        self.layers.iter().map(|l| l.entries.len() as u64).sum()
    }

    /// Bytes spent on values alone.
    pub fn value_bytes(&self) -> u64 {
        VALUE_BYTES * self.nonzeros()
    }

    /// Exact frame length.
    pub fn wire_bytes(&self) -> u64 {
        let per_value = if self.kind.is_dense() {
            VALUE_BYTES
        } else {
            VALUE_BYTES + INDEX_BYTES
        };
        3 + 4 * self.layers.len() as u64 + per_value * self.nonzeros()
    }

    pub fn to_dense(&self) -> Vec<Tensor2> {
        self.layers.iter().map(SparseLayer::to_dense).collect()
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| (l.rows, l.cols)).collect()
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let layer_count = u16::try_from(self.layers.len())
            .map_err(|_| Error::Validation(format!("{} layers exceed the frame limit", self.layers.len())))?;
        let mut out = Vec::with_capacity(self.wire_bytes() as usize);
        out.push(self.kind as u8);
        out.extend_from_slice(&layer_count.to_le_bytes());
        for l in &self.layers {
            let n = u32::try_from(l.entries.len())
                .map_err(|_| Error::Validation("layer too large to frame".into()))?;
            out.extend_from_slice(&n.to_le_bytes());
        }
        for l in &self.layers {
            let size = l.rows * l.cols;
            if self.kind.is_dense() && l.entries.len() != size {
                return Err(Error::Validation(format!(
                    "dense layer with {} of {size} entries",
                    l.entries.len()
                )));
            }
            let mut prev: Option<u32> = None;
            for &(i, v) in &l.entries {
                if (i as usize) >= size || prev.is_some_and(|p| p >= i) {
                    return Err(Error::Validation(format!(
                        "index {i} out of order or range for {size} entries"
                    )));
                }
                prev = Some(i);
                if !self.kind.is_dense() {
                    out.extend_from_slice(&i.to_le_bytes());
                }
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parses a frame. Layer `i` has shape `shapes[i % shapes.len()]`, so a
    /// bundle of several same-shaped tensor sets decodes with one set of
    /// shapes.
    pub fn decode(bytes: &[u8], shapes: &[(usize, usize)]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let kind = PayloadKind::from_byte(r.u8()?)
            .ok_or_else(|| Error::Decode(format!("unknown payload kind {}", bytes[0])))?;
        let layer_count = r.u16()? as usize;
        if layer_count > 0 && shapes.is_empty() {
            return Err(Error::Decode(format!("no shapes supplied for {layer_count} layers")));
        }
        if !shapes.is_empty() && !layer_count.is_multiple_of(shapes.len()) {
            return Err(Error::Decode(format!(
                "{layer_count} layers is not a multiple of {} shapes",
                shapes.len()
            )));
        }
        let counts = (0..layer_count)
            .map(|_| r.u32().map(|c| c as usize))
            .collect::<Result<Vec<_>>>()?;
        let mut layers = Vec::with_capacity(layer_count);
        for (li, &count) in counts.iter().enumerate() {
            let (rows, cols) = shapes[li % shapes.len()];
            let size = rows * cols;
            if count > size || (kind.is_dense() && count != size) {
                return Err(Error::Decode(format!("layer {li}: {count} entries for {size} slots")));
            }
            let mut entries = Vec::with_capacity(count);
            let mut prev: Option<u32> = None;
            for k in 0..count {
                let i = if kind.is_dense() { k as u32 } else { r.u32()? };
                let v = r.f32()?;
                if (i as usize) >= size || prev.is_some_and(|p| p >= i) {
                    return Err(Error::Decode(format!("layer {li}: bad index {i}")));
                }
                prev = Some(i);
                entries.push((i, f64::from(v)));
            }
            layers.push(SparseLayer { rows, cols, entries });
        }
        if r.pos != bytes.len() {
            return Err(Error::Decode(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { kind, layers })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.pos + N;
        let slice = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::Decode(format!("frame truncated at byte {}", self.pos)))?;
        self.pos = end;
        Ok(slice.try_into().expect("slice has N bytes"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take::<1>()?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take()?))
    }
}

/// `ceil(kappa * n)`, treating products within 1e-9 of an integer as exact.
pub fn topk_count(n: usize, kappa: f64) -> usize {
    let x = kappa * n as f64;
    let r = libm::round(x);
    let k = if (x - r).abs() <= 1e-9 * x.max(1.0) {
        r
    } else {
        libm::ceil(x)
    };
    (k as usize).min(n)
}

/// Keeps the `ceil(kappa * N)` largest-magnitude entries across all tensors
/// (`N` = total entry count), ties going to the lower flat index. Zeros are
/// never transmitted, so fewer entries survive when fewer are nonzero.
pub fn sparsify_topk(kind: PayloadKind, tensors: &[Tensor2], kappa: f64) -> Result<SparsePayload> {
    sparsify_topk_by(kind, tensors, tensors, kappa)
}

/// Like [`sparsify_topk`], but ranks entries by `|scores|` and transmits the
/// matching entries of `values`. Entries whose score is zero are never sent.
pub fn sparsify_topk_by(
    kind: PayloadKind,
    values: &[Tensor2],
    scores: &[Tensor2],
    kappa: f64,
) -> Result<SparsePayload> {
    if !(kappa > 0.0 && kappa <= 1.0) {
        return Err(Error::Validation(format!("kappa must be in (0, 1], got {kappa}")));
    }
    if kind.is_dense() {
        return Err(Error::Validation("top-k selection of a dense kind".into()));
    }
    if values.len() != scores.len() || values.iter().zip(scores).any(|(v, s)| v.shape() != s.shape()) {
        return Err(crate::error::dim_err("sparsify_topk_by", "values and scores differ in shape".into()));
    }
    let total: usize = values.iter().map(Tensor2::len).sum();
    let keep = topk_count(total, kappa);
    let mut candidates: Vec<(usize, f64)> = Vec::new();
    let mut offset = 0;
    for t in scores {
        candidates.extend(
            t.data()
                .iter()
                .enumerate()
                .filter(|(_, v)| **v != 0.0)
                .map(|(i, v)| (offset + i, v.abs())),
        );
        offset += t.len();
    }
    let order = |a: &(usize, f64), b: &(usize, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
    if keep < candidates.len() {
        if keep == 0 {
            candidates.clear();
        } else {
            candidates.select_nth_unstable_by(keep - 1, order);
            candidates.truncate(keep);
        }
    }
    let mut selected: Vec<usize> = candidates.into_iter().map(|(i, _)| i).collect();
    selected.sort_unstable();
    let mut layers: Vec<SparseLayer> = values
        .iter()
        .map(|t| SparseLayer {
            rows: t.rows(),
            cols: t.cols(),
            entries: Vec::new(),
        })
        .collect();
    let mut layer = 0;
    let mut start = 0;
    for flat in selected {
        while flat >= start + values[layer].len() {
            start += values[layer].len();
            layer += 1;
        }
        let local = flat - start;
        let v = values[layer].data()[local];
        if v != 0.0 {
            layers[layer].entries.push((local as u32, v));
        }
    }
    Ok(SparsePayload { kind, layers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn t(rows: &[&[f64]]) -> Tensor2 {
        Tensor2::from_rows(rows).unwrap()
    }

    #[test]
    fn keeps_largest_magnitudes() {
        let p = sparsify_topk(PayloadKind::Base, &[t(&[&[5.0, -4.0, 3.0, 2.0]])], 0.5).unwrap();
        assert_eq!(p.layers[0].entries, vec![(0, 5.0), (1, -4.0)]);
    }

    #[test]
    fn ties_go_to_lower_index_across_layers() {
        let p = sparsify_topk(
            PayloadKind::Adaptive,
            &[t(&[&[1.0, 2.0]]), t(&[&[2.0], &[-2.0]])],
            0.5,
        )
        .unwrap();
        assert_eq!(p.layers[0].entries, vec![(1, 2.0)]);
        assert_eq!(p.layers[1].entries, vec![(0, 2.0)]);
    }

    #[test]
    fn full_kappa_is_lossless() {
        let x = t(&[&[0.5, 0.0, -1.25], &[3.0, 2.0, 0.0]]);
        let p = sparsify_topk(PayloadKind::Base, core::slice::from_ref(&x), 1.0).unwrap();
        assert_eq!(p.to_dense(), vec![x]);
    }

    #[test]
    fn zero_mask_transmits_nothing() {
        let p = sparsify_topk(PayloadKind::Base, &[Tensor2::zeros(3, 3)], 0.3).unwrap();
        assert_eq!(p.nonzeros(), 0);
    }

    #[test]
    fn ranking_by_scores_sends_values() {
        let values = [t(&[&[1.0, 2.0, 3.0, 4.0]])];
        let scores = [t(&[&[9.0, 0.0, -5.0, 1.0]])];
        let p = sparsify_topk_by(PayloadKind::Base, &values, &scores, 0.5).unwrap();
        assert_eq!(p.layers[0].entries, vec![(0, 1.0), (2, 3.0)]);
        let none = sparsify_topk_by(PayloadKind::Base, &values, &[Tensor2::zeros(1, 4)], 1.0).unwrap();
        assert_eq!(none.nonzeros(), 0);
    }

    #[test]
    fn count_rounding() {
        assert_eq!(topk_count(3_012_920, 0.3), 903_876);
        assert_eq!(topk_count(3_012_920, 0.03), 90_388);
        assert_eq!(topk_count(4, 0.5), 2);
        assert_eq!(topk_count(10, 0.01), 1);
        assert_eq!(topk_count(7, 1.0), 7);
    }

    #[test]
    fn kappa_validation() {
        assert!(sparsify_topk(PayloadKind::Base, &[], 0.0).is_err());
        assert!(sparsify_topk(PayloadKind::Base, &[], 1.5).is_err());
    }

    #[test]
    fn frame_sizes() {
        let p = SparsePayload::nonzeros_of(PayloadKind::Global, &[t(&[&[1.0, 0.0]]), t(&[&[0.0], &[2.0]])]);
        let bytes = p.encode().unwrap();
        assert_eq!(bytes.len() as u64, p.wire_bytes());
        assert_eq!(p.wire_bytes(), 3 + 8 + 2 * 8);
        assert_eq!(p.value_bytes(), 8);
        let d = SparsePayload::dense(PayloadKind::DenseModel, &[t(&[&[1.0, 0.0]])]);
        assert_eq!(d.nonzeros(), 2);
        assert_eq!(d.encode().unwrap().len() as u64, 3 + 4 + 8);
    }

    #[test]
    fn decode_rejects_garbage() {
        let shapes = [(1, 2)];
        let good = SparsePayload::nonzeros_of(PayloadKind::Base, &[t(&[&[1.0, 2.0]])])
            .encode()
            .unwrap();
        assert!(SparsePayload::decode(&good, &shapes).is_ok());
        assert!(SparsePayload::decode(&good[..good.len() - 1], &shapes).is_err());
        let mut extra = good.clone();
        extra.push(0);
        assert!(SparsePayload::decode(&extra, &shapes).is_err());
        let mut bad_kind = good.clone();
        bad_kind[0] = 99;
        assert!(SparsePayload::decode(&bad_kind, &shapes).is_err());
        // second index equal to the first
        let mut dup = good.clone();
        dup[15..19].copy_from_slice(&0u32.to_le_bytes());
        assert!(SparsePayload::decode(&dup, &shapes).is_err());
    }

    #[test]
    fn bundles_decode_with_cyclic_shapes() {
        let a = [t(&[&[1.0, 0.0]]), t(&[&[3.0]])];
        let b = [t(&[&[0.0, 2.0]]), t(&[&[0.0]])];
        let mut bundle = SparsePayload::nonzeros_of(PayloadKind::Knowledge, &a);
        bundle.layers.extend(SparsePayload::nonzeros_of(PayloadKind::Knowledge, &b).layers);
        let back = SparsePayload::decode(&bundle.encode().unwrap(), &[(1, 2), (1, 1)]).unwrap();
        assert_eq!(back, bundle);
    }
}
