//! Invariants checked over random inputs.

use std::sync::Arc;

use fcl_core::federation::{aggregate_global, apply_global, sparsify_topk, PayloadKind, SparseLayer, SparsePayload};
use fcl_core::metrics::AccuracyMatrix;
use fcl_core::model::{DecomposedClientModel, KbItem, ModelSpec};
use fcl_core::tape::Tape;
use fcl_core::{Tensor1, Tensor2};
use proptest::prelude::*;

fn tensor(rows: usize, cols: usize) -> impl Strategy<Value = Tensor2> {
    prop::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |d| Tensor2::new(rows, cols, d).unwrap())
}

fn shaped_set() -> impl Strategy<Value = Vec<Tensor2>> {
    prop::collection::vec((1usize..5, 1usize..5), 1..4)
        .prop_flat_map(|shapes| shapes.into_iter().map(|(r, c)| tensor(r, c)).collect::<Vec<_>>())
}

/// A sparse payload with f32-representable values.
fn sparse_payload() -> impl Strategy<Value = SparsePayload> {
    prop::collection::vec((1usize..6, 1usize..6), 0..4).prop_flat_map(|shapes| {
        shapes
            .into_iter()
            .map(|(r, c)| {
                prop::collection::btree_map(0u32..(r * c) as u32, -1e3f32..1e3, 0..=r * c).prop_map(move |m| {
                    SparseLayer {
                        rows: r,
                        cols: c,
                        entries: m.into_iter().map(|(i, v)| (i, f64::from(v))).collect(),
                    }
                })
            })
            .collect::<Vec<_>>()
            .prop_map(|layers| SparsePayload {
                kind: PayloadKind::Adaptive,
                layers,
            })
    })
}

fn decomposed(dims: &[usize]) -> DecomposedClientModel {
    let spec = ModelSpec::plain(dims).unwrap();
    let shapes = spec.layers.shapes();
    let base = shapes
        .iter()
        .map(|&(r, c)| Tensor2::new(r, c, (0..r * c).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap())
        .collect();
    let bias = shapes.iter().map(|&(_, c)| Tensor1::zeros(c)).collect();
    DecomposedClientModel::new(0, spec, base, bias).unwrap()
}

proptest! {
    #[test]
    fn codec_round_trips(p in sparse_payload()) {
        let bytes = p.encode().unwrap();
        prop_assert_eq!(bytes.len() as u64, p.wire_bytes());
        prop_assert_eq!(p.value_bytes(), 4 * p.nonzeros());
        let back = SparsePayload::decode(&bytes, &p.shapes()).unwrap();
        prop_assert_eq!(back, p);
    }

    #[test]
    fn dense_codec_round_trips(set in shaped_set()) {
        let rounded: Vec<Tensor2> = set.iter().map(|t| t.map(|v| f64::from(v as f32))).collect();
        let p = SparsePayload::dense(PayloadKind::DenseModel, &rounded);
        let shapes: Vec<(usize, usize)> = rounded.iter().map(Tensor2::shape).collect();
        let back = SparsePayload::decode(&p.encode().unwrap(), &shapes).unwrap();
        prop_assert_eq!(back.to_dense(), rounded);
    }

    #[test]
    fn topk_keeps_the_largest(set in shaped_set(), kappa in 0.01f64..=1.0) {
        let p = sparsify_topk(PayloadKind::Base, &set, kappa).unwrap();
        let total: usize = set.iter().map(Tensor2::len).sum();
        let nonzero = set.iter().map(Tensor2::count_nonzero).sum::<usize>();
        let expected = ((kappa * total as f64).ceil() as usize).min(nonzero);
        // the ceiling may differ by one when kappa * total is within rounding of an integer
        prop_assert!((p.nonzeros() as i64 - expected as i64).abs() <= 1);
        let kept: Vec<f64> = p.layers.iter().flat_map(|l| l.entries.iter().map(|e| e.1.abs())).collect();
        let dense = p.to_dense();
        let min_kept = kept.iter().cloned().fold(f64::INFINITY, f64::min);
        for (orig, sent) in set.iter().zip(&dense) {
            for (a, b) in orig.data().iter().zip(sent.data()) {
                if *b == 0.0 {
                    prop_assert!(a.abs() <= min_kept);
                } else {
                    prop_assert_eq!(a, b);
                }
            }
        }
    }

    #[test]
    fn aggregation_matches_per_index_mean(
        uploads in (1usize..4, 1usize..4, 1usize..5).prop_flat_map(|(r, c, n)| {
            prop::collection::vec(tensor(r, c).prop_map(|t| t.map(|v| if v.abs() < 0.7 { 0.0 } else { v })), n)
        })
    ) {
        let payloads: Vec<SparsePayload> = uploads
            .iter()
            .map(|t| SparsePayload::nonzeros_of(PayloadKind::Base, std::slice::from_ref(t)))
            .collect();
        let g = aggregate_global(&payloads).unwrap();
        let (rows, cols) = uploads[0].shape();
        for i in 0..rows {
            for j in 0..cols {
                let mut s = 0.0;
                for u in &uploads {
                    s += u.get(i, j);
                }
                prop_assert!((g[0].get(i, j) - s / uploads.len() as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_uploads_are_a_fixpoint(t in tensor(3, 4), n in 1usize..6) {
        let p = SparsePayload::nonzeros_of(PayloadKind::Base, std::slice::from_ref(&t));
        let g = aggregate_global(&vec![p; n]).unwrap();
        prop_assert_eq!(&g[0], &t);
    }

    #[test]
    fn apply_global_touches_only_nonzeros(base in tensor(3, 3), global in tensor(3, 3), cut in 0.0f64..2.0) {
        let global = global.map(|v| if v.abs() < cut { 0.0 } else { v });
        let mut out = vec![base.clone()];
        apply_global(&mut out, std::slice::from_ref(&global)).unwrap();
        for ((o, b), g) in out[0].data().iter().zip(base.data()).zip(global.data()) {
            prop_assert_eq!(*o, if *g != 0.0 { *g } else { *b });
        }
    }

    #[test]
    fn fresh_task_composes_to_the_base(d0 in 1usize..5, d1 in 1usize..5, d2 in 1usize..5) {
        let mut m = decomposed(&[d0, d1, d2]);
        m.allocate_task(Vec::new()).unwrap();
        prop_assert_eq!(m.compose(0).unwrap(), m.base().to_vec());
    }

    #[test]
    fn composition_is_additive(
        mask in prop::collection::vec(-2.0f64..2.0, 3),
        a in tensor(2, 3),
        k1 in tensor(2, 3),
        k2 in tensor(2, 3),
        alpha in prop::collection::vec(-1.0f64..1.0, 2),
    ) {
        let mut m = decomposed(&[2, 3]);
        let kb = vec![Arc::new(KbItem::new(1, 0, vec![k1.clone()])), Arc::new(KbItem::new(2, 0, vec![k2.clone()]))];
        m.allocate_task(kb).unwrap();
        m.mask_mut(0).unwrap()[0] = Tensor1::new(mask.clone());
        m.adaptive_mut(0).unwrap()[0] = a.clone();
        m.attention_mut(0).unwrap().copy_from_slice(&alpha);
        let theta = m.compose(0).unwrap();
        let b = &m.base()[0];
        for i in 0..2 {
            for j in 0..3 {
                let expect = b.get(i, j) * mask[j] + a.get(i, j) + alpha[0] * k1.get(i, j) + alpha[1] * k2.get(i, j);
                prop_assert!((theta[0].get(i, j) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradients_are_linear_in_the_loss(x in tensor(3, 2), w in tensor(2, 4), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        // d/dw [a * sum(relu(x w)) + b * sum(x w)] = a * g_relu + b * g_lin
        let grad = |ca: f64, cb: f64| {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let wv = tape.leaf(w.clone());
            let z = tape.matmul(xv, wv).unwrap();
            let r = tape.relu(z).unwrap();
            let s1 = tape.sum(r).unwrap();
            let s2 = tape.sum(z).unwrap();
            let t1 = tape.scale(s1, ca).unwrap();
            let t2 = tape.scale(s2, cb).unwrap();
            let loss = tape.add(t1, t2).unwrap();
            tape.backward(loss).unwrap().wrt(&tape, wv).unwrap()
        };
        let combined = grad(a, b);
        let relu_only = grad(1.0, 0.0);
        let lin_only = grad(0.0, 1.0);
        for ((c, r), l) in combined.data().iter().zip(relu_only.data()).zip(lin_only.data()) {
            prop_assert!((c - (a * r + b * l)).abs() < 1e-9);
        }
    }

    #[test]
    fn non_decreasing_rows_never_forget(
        start in prop::collection::vec(0.0f64..0.5, 4),
        gains in prop::collection::vec(0.0f64..0.1, 16),
    ) {
        let mut rows = Vec::new();
        for t in 0..4 {
            rows.push((0..=t).map(|i| start[i] + (i..=t).map(|s| gains[s * 4 + i]).sum::<f64>()).collect::<Vec<_>>());
        }
        let m = AccuracyMatrix::from_rows(rows).unwrap();
        prop_assert!(m.forgetting(4).unwrap() <= 0.0);
    }
}

#[test]
fn past_masks_and_records_reject_edits() {
    let mut m = decomposed(&[2, 2]);
    m.allocate_task(Vec::new()).unwrap();
    m.finish_task().unwrap();
    m.allocate_task(Vec::new()).unwrap();
    assert!(m.mask_mut(0).is_err());
    assert!(m.attention_mut(0).is_err());
    assert!(m.mask_mut(1).is_ok());
}
