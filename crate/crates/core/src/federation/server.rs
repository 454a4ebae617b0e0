//! Participant selection and global aggregation.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::federation::payload::SparsePayload;
use crate::tensor::Tensor2;

/// `ceil(fraction * clients)` distinct clients (at least one), ascending.
pub fn sample_clients<R: Rng>(clients: usize, fraction: f64, rng: &mut R) -> Result<Vec<usize>> {
    if clients == 0 {
        return Err(Error::Validation("no clients to sample".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Validation(format!(
            "participation fraction must be in (0, 1], got {fraction}"
        )));
    }
    let k = crate::federation::payload::topk_count(clients, fraction).max(1);
    if k == clients {
        return Ok((0..clients).collect());
    }
    let mut picks = rand::seq::index::sample(rng, clients, k).into_vec();
    picks.sort_unstable();
    Ok(picks)
}

/// Entry-wise mean of the received payloads, entries a payload omits
/// counting as zero.
pub fn aggregate_global(payloads: &[SparsePayload]) -> Result<Vec<Tensor2>> {
    let first = payloads
        .first()
        .ok_or_else(|| Error::Protocol("aggregation with no uploads".into()))?;
    let shapes = first.shapes();
    // Incremental mean: identical uploads come back bit for bit.
    let mut mean: Vec<Tensor2> = shapes.iter().map(|&(r, c)| Tensor2::zeros(r, c)).collect();
    let mut dense = mean.clone();
    for (k, p) in payloads.iter().enumerate() {
        if p.shapes() != shapes {
            return Err(Error::Protocol("uploads disagree on layer shapes".into()));
        }
        let inv = 1.0 / (k + 1) as f64;
        for ((m, d), layer) in mean.iter_mut().zip(&mut dense).zip(&p.layers) {
            let d = d.data_mut();
            for &(i, v) in &layer.entries {
                d[i as usize] = v;
            }
            for (a, &v) in m.data_mut().iter_mut().zip(d.iter()) {
                *a += (v - *a) * inv;
            }
            for &(i, _) in &layer.entries {
                d[i as usize] = 0.0;
            }
        }
    }
    Ok(mean)
}

/// Overwrites the entries of `target` where `global` is nonzero.
pub fn apply_global(target: &mut [Tensor2], global: &[Tensor2]) -> Result<()> {
    if target.len() != global.len() || target.iter().zip(global).any(|(a, b)| a.shape() != b.shape()) {
        return Err(crate::error::dim_err("apply_global", "layer shapes differ".into()));
    }
    for (t, g) in target.iter_mut().zip(global) {
        for (a, &b) in t.data_mut().iter_mut().zip(g.data()) {
            if b != 0.0 {
                *a = b;
            }
        }
    }
    Ok(())
}
