//! Continual-learning metrics against brute-force oracles.

use fcl_core::metrics::{mean, sample_std, AccuracyMatrix};
use fcl_core::rng::{rng_for, Purpose};
use rand::Rng;

fn random_matrix<R: Rng>(rng: &mut R, tasks: usize) -> Vec<Vec<f64>> {
    (0..tasks)
        .map(|t| (0..=t).map(|_| rng.random_range(0.0..=1.0)).collect())
        .collect()
}

fn oracle_avg(rows: &[Vec<f64>], t: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..t {
        s += rows[t - 1][i];
    }
    s / t as f64
}

fn oracle_forgetting(rows: &[Vec<f64>], big_t: usize) -> f64 {
    let mut total = 0.0;
    for i in 0..big_t - 1 {
        let mut worst = f64::NEG_INFINITY;
        for t in i..big_t - 1 {
            let gap = rows[t][i] - rows[big_t - 1][i];
            if gap > worst {
                worst = gap;
            }
        }
        total += worst;
    }
    total / (big_t - 1) as f64
}

#[test]
fn random_matrices_match_oracles() {
    let mut rng = rng_for(42, Purpose::Harness, 0, 0, 0);
    for _ in 0..100 {
        let tasks = rng.random_range(2..=8);
        let rows = random_matrix(&mut rng, tasks);
        let m = AccuracyMatrix::from_rows(rows.clone()).unwrap();
        for t in 1..=tasks {
            assert!((m.avg_accuracy(t).unwrap() - oracle_avg(&rows, t)).abs() < 1e-12);
        }
        for t in 2..=tasks {
            assert!((m.forgetting(t).unwrap() - oracle_forgetting(&rows, t)).abs() < 1e-12);
        }
    }
}

#[test]
fn hand_cases() {
    let m = AccuracyMatrix::from_rows(vec![vec![0.9], vec![0.7, 0.8]]).unwrap();
    assert!((m.forgetting(2).unwrap() - 0.2).abs() < 1e-12);
    assert!((m.avg_accuracy(2).unwrap() - 0.75).abs() < 1e-12);
    assert!(m.forgetting(1).is_err());
    let single = AccuracyMatrix::from_rows(vec![vec![0.8]]).unwrap();
    assert_eq!(single.avg_accuracy(1).unwrap(), 0.8);
}

#[test]
fn spread_statistics() {
    assert_eq!(mean(&[1.0, 2.0, 3.0]), 2.0);
    assert!((sample_std(&[1.0, 2.0, 3.0]) - 1.0).abs() < 1e-12);
    assert_eq!(sample_std(&[5.0]), 0.0);
}
