//! Analytic gradients against central differences, and the Fisher estimate
//! against its closed form for a linear softmax model.

use std::sync::Arc;

use fcl_core::gradcheck::{finite_diff_check, DEFAULT_STEP};
use fcl_core::model::{DecomposedClientModel, DenseClientModel, KbItem, ModelSpec};
use fcl_core::objective::{
    dense_fisher, dense_loss, fedweit_loss, fisher_estimate, Method, ObjectiveConfig,
};
use fcl_core::rng::{rng_for, Purpose};
use fcl_core::{Tensor1, Tensor2};
use rand::Rng;

fn random_tensor<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor2 {
    Tensor2::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Values bounded away from zero so the l1 kink is never straddled.
fn away_from_zero<R: Rng>(rng: &mut R) -> f64 {
    let v: f64 = rng.random_range(0.2..1.0);
    if rng.random_bool(0.5) {
        v
    } else {
        -v
    }
}

struct Case {
    model: DecomposedClientModel,
    x: Tensor2,
    labels: Vec<usize>,
}

/// Two decomposed layers and a head, second task in progress with two
/// knowledge-base items, every trainable value randomized.
fn tiny_case(seed: u64) -> Case {
    let mut rng = rng_for(seed, Purpose::Harness, 0, 0, 0);
    let dims = [
        rng.random_range(2..=8),
        rng.random_range(2..=8),
        rng.random_range(2..=8),
    ];
    let classes = rng.random_range(2..=4);
    let spec = ModelSpec::multi_head(&dims, classes).unwrap();
    let shapes = spec.layers.shapes();
    let base: Vec<Tensor2> = shapes.iter().map(|&(r, c)| random_tensor(&mut rng, r, c)).collect();
    let bias: Vec<Tensor1> = shapes
        .iter()
        .map(|&(_, c)| Tensor1::new((0..c).map(|_| rng.random_range(-0.5..0.5)).collect()))
        .collect();
    let mut model = DecomposedClientModel::new(0, spec, base, bias).unwrap();
    model.allocate_task(Vec::new()).unwrap();
    let n = model.trainable_flat(0).unwrap().len();
    let first: Vec<f64> = (0..n).map(|_| away_from_zero(&mut rng)).collect();
    model.set_trainable_flat(0, &first).unwrap();
    model.finish_task().unwrap();
    let kb = (1..=2)
        .map(|c| {
            let tensors = shapes.iter().map(|&(r, c)| random_tensor(&mut rng, r, c)).collect();
            Arc::new(KbItem::new(c, 0, tensors))
        })
        .collect();
    model.allocate_task(kb).unwrap();
    let n = model.trainable_flat(1).unwrap().len();
    let second: Vec<f64> = (0..n).map(|_| away_from_zero(&mut rng)).collect();
    model.set_trainable_flat(1, &second).unwrap();
    let batch = 5;
    let x = random_tensor(&mut rng, batch, dims[0]);
    let labels = (0..batch).map(|_| rng.random_range(0..classes)).collect();
    Case { model, x, labels }
}

#[test]
fn decomposed_objective_matches_finite_differences() {
    for seed in 0..10 {
        let case = tiny_case(seed);
        let params = case.model.trainable_flat(1).unwrap();
        for l1 in [0.0, 0.1, 0.4] {
            for drift in [0.0, 100.0] {
                let cfg = ObjectiveConfig {
                    l1,
                    drift,
                    ..ObjectiveConfig::new(Method::FedWeit)
                };
                let check = finite_diff_check(
                    |p| {
                        let mut m = case.model.clone();
                        m.set_trainable_flat(1, p)?;
                        let (loss, g) = fedweit_loss(&m, 1, &case.x, &case.labels, &cfg)?;
                        Ok((loss, g.flatten()))
                    },
                    &params,
                    DEFAULT_STEP,
                )
                .unwrap();
                assert!(
                    check.passes(1e-4),
                    "seed {seed} l1 {l1} drift {drift}: error {} at {}",
                    check.max_rel_error,
                    check.worst_index
                );
            }
        }
    }
}

#[test]
fn baseline_objective_matches_finite_differences() {
    for seed in 0..5 {
        let mut rng = rng_for(seed, Purpose::Harness, 1, 0, 0);
        let spec = ModelSpec::multi_head(&[4, 6, 5], 3).unwrap();
        let shapes = spec.layers.shapes();
        let weights: Vec<Tensor2> = shapes.iter().map(|&(r, c)| random_tensor(&mut rng, r, c)).collect();
        let biases: Vec<Tensor1> = shapes.iter().map(|&(_, c)| Tensor1::zeros(c)).collect();
        let mut model = DenseClientModel::new(0, spec, weights, biases).unwrap();
        model.begin_task().unwrap();
        let x = random_tensor(&mut rng, 6, 4);
        let labels: Vec<usize> = (0..6).map(|_| rng.random_range(0..3)).collect();
        let fisher = dense_fisher(&model, 0, &x, &labels, &[0, 1, 2, 3]).unwrap();
        model.finish_task().unwrap();
        model.begin_task().unwrap();
        let n = model.trainable_flat(1).unwrap().len();
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        model.set_trainable_flat(1, &p).unwrap();
        let global: Vec<Tensor2> = model
            .shared_shapes()
            .iter()
            .map(|&(r, c)| random_tensor(&mut rng, r, c))
            .collect();
        for method in [Method::FedAvg, Method::FedProx, Method::FedProxEwc, Method::LocalEwc] {
            let cfg = ObjectiveConfig {
                prox: 0.5,
                ..ObjectiveConfig::new(method)
            };
            let fishers = std::slice::from_ref(&fisher);
            let check = finite_diff_check(
                |q| {
                    let mut m = model.clone();
                    m.set_trainable_flat(1, q)?;
                    let (loss, g) = dense_loss(&m, 1, &x, &labels, &cfg, Some(&global), fishers)?;
                    Ok((loss, g.flatten()))
                },
                &p,
                DEFAULT_STEP,
            )
            .unwrap();
            assert!(check.passes(1e-4), "{}: {}", method.name(), check.max_rel_error);
        }
    }
}

#[test]
fn fisher_of_linear_softmax_matches_closed_form() {
    let mut rng = rng_for(9, Purpose::Harness, 2, 0, 0);
    let (d, k, n) = (3, 4, 7);
    let spec = ModelSpec::plain(&[d, k]).unwrap();
    let w = random_tensor(&mut rng, d, k);
    let b = Tensor1::new((0..k).map(|_| rng.random_range(-0.5..0.5)).collect());
    let mut model = DenseClientModel::new(0, spec, vec![w.clone()], vec![b.clone()]).unwrap();
    model.begin_task().unwrap();
    let x = random_tensor(&mut rng, n, d);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    let samples: Vec<usize> = (0..n).collect();
    let got = dense_fisher(&model, 0, &x, &labels, &samples).unwrap();

    // per-sample gradient of -log softmax(xW + b)[y]: dW = x (p - e_y)^T, db = p - e_y
    let mut fw = vec![0.0; d * k];
    let mut fb = vec![0.0; k];
    for i in 0..n {
        let xi = x.row(i);
        let z: Vec<f64> = (0..k)
            .map(|j| b.data()[j] + (0..d).map(|r| xi[r] * w.get(r, j)).sum::<f64>())
            .collect();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = z.iter().map(|v| (v - m).exp()).sum();
        for j in 0..k {
            let g = (z[j] - m).exp() / s - if j == labels[i] { 1.0 } else { 0.0 };
            fb[j] += g * g / n as f64;
            for r in 0..d {
                fw[r * k + j] += (xi[r] * g).powi(2) / n as f64;
            }
        }
    }
    for (a, e) in got.fisher[0].data().iter().zip(&fw) {
        assert!((a - e).abs() < 1e-12);
    }
    for (a, e) in got.fisher[1].data().iter().zip(&fb) {
        assert!((a - e).abs() < 1e-12);
    }
    assert_eq!(got.anchor, model.shared_params());
}

#[test]
fn fisher_of_constant_gradients_is_their_square() {
    let anchor = vec![Tensor2::zeros(1, 2)];
    let g = Tensor2::from_rows(&[&[2.0, -3.0]]).unwrap();
    let f = fisher_estimate(anchor, (0..4).map(|_| Ok(vec![g.clone()]))).unwrap();
    assert_eq!(f.fisher[0].data(), &[4.0, 9.0]);
    assert!(fisher_estimate(vec![Tensor2::zeros(1, 1)], std::iter::empty()).is_err());
}
