//! Round-loop bookkeeping on small federations.

use fcl_core::data::StreamParams;
use fcl_core::experiment::{run_seed, ExperimentConfig, Schedule, StreamKind};
use fcl_core::federation::{Direction, FederationConfig, KbSchedule, PayloadKind, TrainConfig};
use fcl_core::objective::{Method, ObjectiveConfig};

fn tiny(method: Method, clients: usize, rounds: usize, tasks: usize) -> ExperimentConfig {
    ExperimentConfig {
        objective: ObjectiveConfig::new(method),
        clients,
        tasks_per_client: tasks,
        classes_per_task: 2,
        stream: StreamKind::NonIid,
        stream_params: StreamParams {
            feature_dim: 6,
            sigma: 0.1,
            train_per_class: 8,
            valid_per_class: 3,
            test_per_class: 3,
            pool_classes: None,
        },
        hidden: vec![5],
        federation: FederationConfig {
            rounds_per_task: rounds,
            ..FederationConfig::default()
        },
        train: TrainConfig {
            batch_size: 4,
            lr: 1e-2,
            ..TrainConfig::default()
        },
        schedule: Schedule::Sync,
    }
}

#[test]
fn sync_bookkeeping_over_small_grids() {
    for clients in [1usize, 2, 5] {
        for rounds in [1usize, 3] {
            for tasks in [1usize, 3] {
                let cfg = tiny(Method::FedWeit, clients, rounds, tasks);
                let out = run_seed(&cfg, 11).unwrap();
                let label = format!("C={clients} R={rounds} T={tasks}");
                assert_eq!(out.rounds, (rounds * tasks) as u64, "{label}");
                assert_eq!(out.kb_len, clients * tasks, "{label}");
                // one delivery per (client, task), holding every foreign entry so far
                assert_eq!(out.deliveries.len(), clients * tasks, "{label}");
                for d in &out.deliveries {
                    assert_eq!(d.items.len(), (clients - 1) * d.task as usize, "{label}");
                    assert!(d.items.iter().all(|&(c, t)| c != d.client && t < d.task), "{label}");
                }
                for c in 0..clients as u32 {
                    for t in 0..tasks as u32 {
                        let sent = |kind| {
                            out.ledger
                                .records()
                                .iter()
                                .filter(|r| r.sender.to_string() == c.to_string() && r.task == t && r.kind == kind)
                                .count()
                        };
                        assert_eq!(sent(PayloadKind::Base), rounds, "{label}");
                        assert_eq!(sent(PayloadKind::Adaptive), 1, "{label}");
                    }
                }
                let global = out.ledger.totals_where(|r| r.kind == PayloadKind::Global);
                assert_eq!(global.messages, (clients * rounds * tasks) as u64, "{label}");
                for m in &out.accuracy {
                    assert_eq!(m.tasks(), tasks, "{label}");
                }
            }
        }
    }
}

#[test]
fn ledger_rounds_are_monotone_and_totals_resum() {
    let out = run_seed(&tiny(Method::FedWeit, 3, 3, 3), 5).unwrap();
    let recs = out.ledger.records();
    assert!(recs.windows(2).all(|w| w[0].round <= w[1].round));
    for dir in [Direction::ClientToServer, Direction::ServerToClient] {
        let t = out.ledger.totals(dir);
        let bytes: u64 = recs.iter().filter(|r| r.direction == dir).map(|r| r.value_bytes).sum();
        assert_eq!(t.value_bytes, bytes);
        assert!(recs.iter().all(|r| r.value_bytes == 4 * r.nonzeros));
    }
}

#[test]
fn same_seed_same_results() {
    for method in Method::ALL {
        let cfg = tiny(method, 2, 2, 2);
        let a = run_seed(&cfg, 3).unwrap();
        let b = run_seed(&cfg, 3).unwrap();
        assert_eq!(a.ledger, b.ledger, "{}", method.name());
        assert_eq!(a.accuracy, b.accuracy, "{}", method.name());
    }
    let cfg = tiny(Method::FedWeit, 2, 2, 2);
    assert_ne!(run_seed(&cfg, 3).unwrap().ledger, run_seed(&cfg, 4).unwrap().ledger);
}

#[test]
fn dense_and_local_protocols() {
    let out = run_seed(&tiny(Method::FedProx, 2, 2, 2), 1).unwrap();
    assert!(out.deliveries.is_empty());
    let up = out.ledger.totals_where(|r| r.kind == PayloadKind::DenseModel);
    assert_eq!(up.messages, 2 * 2 * 2);
    assert_eq!(up.nonzeros, 8 * out.shared_params as u64);
    let local = run_seed(&tiny(Method::LocalEwc, 2, 2, 2), 1).unwrap();
    assert!(local.ledger.is_empty());
    assert_eq!(local.accuracy[0].tasks(), 2);
}

#[test]
fn equal_budgets_reproduce_sync() {
    for method in [Method::FedWeit, Method::FedProx] {
        let sync = tiny(method, 3, 2, 3);
        let asynchronous = ExperimentConfig {
            schedule: Schedule::Async {
                budgets: vec![vec![2; 3]; 3],
            },
            ..sync.clone()
        };
        let a = run_seed(&sync, 8).unwrap();
        let b = run_seed(&asynchronous, 8).unwrap();
        assert_eq!(a.ledger, b.ledger, "{}", method.name());
        assert_eq!(a.accuracy, b.accuracy, "{}", method.name());
        assert_eq!(a.deliveries, b.deliveries, "{}", method.name());
    }
}

#[test]
fn uneven_budgets_let_fast_clients_share_early() {
    let cfg = ExperimentConfig {
        schedule: Schedule::Async {
            budgets: vec![vec![1, 1, 1], vec![3, 3, 3]],
        },
        ..tiny(Method::FedWeit, 2, 3, 3)
    };
    let out = run_seed(&cfg, 2).unwrap();
    assert_eq!(out.rounds, 9);
    assert_eq!(out.kb_len, 6);
    // client 1 opens its second task after client 0 has finished all three
    let d = out.deliveries.iter().find(|d| d.client == 1 && d.task == 1).unwrap();
    assert_eq!(d.items, vec![(0, 0), (0, 1), (0, 2)]);
}

#[test]
fn partial_participation_samples_ceil_fraction() {
    let mut cfg = tiny(Method::FedWeit, 5, 3, 2);
    cfg.federation.fraction = 0.25;
    let out = run_seed(&cfg, 4).unwrap();
    let base = out.ledger.totals_where(|r| r.kind == PayloadKind::Base);
    assert_eq!(base.messages, 2 * 3 * 2);
    // every client uploads its adaptive weights at every task end
    assert_eq!(out.kb_len, 10);
    // at most one delivery per (client, task)
    let mut seen = std::collections::BTreeSet::new();
    assert!(out.deliveries.iter().all(|d| seen.insert((d.client, d.task))));
}

#[test]
fn round_one_variant_rebuilds_the_kb() {
    let mut cfg = tiny(Method::FedWeit, 3, 2, 3);
    cfg.federation.kb_schedule = KbSchedule::RoundOneOfNextTask;
    let out = run_seed(&cfg, 6).unwrap();
    // the final task's kb holds only the previous task's entries
    assert_eq!(out.kb_len, 3);
    let adaptive = out.ledger.totals_where(|r| r.kind == PayloadKind::Adaptive);
    assert_eq!(adaptive.messages, 3 * 2);
    let async_cfg = ExperimentConfig {
        schedule: Schedule::Async {
            budgets: vec![vec![2; 3]; 3],
        },
        ..cfg
    };
    assert!(run_seed(&async_cfg, 6).is_err());
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = tiny(Method::FedWeit, 2, 2, 2);
    cfg.federation.kappa_base = 0.0;
    assert!(run_seed(&cfg, 0).is_err());
    let mut cfg = tiny(Method::FedWeit, 2, 2, 2);
    cfg.schedule = Schedule::Async {
        budgets: vec![vec![1, 0], vec![1, 1]],
    };
    assert!(run_seed(&cfg, 0).is_err());
    let mut cfg = tiny(Method::FedWeit, 2, 2, 2);
    cfg.federation.fraction = 1.5;
    assert!(run_seed(&cfg, 0).is_err());
}

mod state {
    use super::*;
    use fcl_core::federation::{FedWeitClient, Simulation};
    use fcl_core::model::{init_shared, DecomposedClientModel};
    use fcl_core::rng::{rng_for, Purpose};
    use fcl_core::Tensor2;

    fn simulation(cfg: &ExperimentConfig, seed: u64) -> Simulation<FedWeitClient> {
        let spec = cfg.model_spec().unwrap();
        let mut rng = rng_for(seed, Purpose::GlobalInit, 0, 0, 0);
        let (w, b) = init_shared(&spec.layers, &mut rng);
        let global: Vec<Tensor2> = w.iter().zip(&b).flat_map(|(w, b)| [w.clone(), b.to_row()]).collect();
        let clients = cfg
            .streams(seed)
            .unwrap()
            .into_iter()
            .map(|s| {
                let m = DecomposedClientModel::new(s.client, spec.clone(), w.clone(), b.clone()).unwrap();
                FedWeitClient::new(m, s, cfg.objective, cfg.train.clone(), seed).unwrap()
            })
            .collect();
        Simulation::new(FederationConfig { seed, ..cfg.federation.clone() }, clients, global).unwrap()
    }

    #[test]
    fn kb_entries_and_past_task_state_stay_fixed() {
        let cfg = tiny(Method::FedWeit, 3, 3, 3);
        let mut sim = simulation(&cfg, 21);
        sim.run_task_sync().unwrap();
        let kb_after_first: Vec<Vec<Tensor2>> = sim.kb().entries().map(|e| e.item.tensors().to_vec()).collect();
        let masks: Vec<_> = sim.clients().iter().map(|c| c.model().mask(0).unwrap().to_vec()).collect();
        let heads: Vec<_> = sim.clients().iter().map(|c| c.model().head(0).unwrap().cloned()).collect();
        sim.run_task_sync().unwrap();
        sim.run_task_sync().unwrap();
        for (i, e) in sim.kb().entries().filter(|e| e.item.origin_task() == 0).enumerate() {
            assert_eq!(e.item.tensors(), kb_after_first[i].as_slice());
        }
        for (c, client) in sim.clients().iter().enumerate() {
            assert_eq!(client.model().mask(0).unwrap(), masks[c].as_slice());
            assert_eq!(client.model().head(0).unwrap().cloned(), heads[c]);
        }
        assert!(sim.run_task_sync().is_err());
    }

    #[test]
    fn uploads_never_exceed_kappa() {
        let cfg = tiny(Method::FedWeit, 2, 2, 2);
        let out = run_seed(&cfg, 30).unwrap();
        let adaptive = out.adaptive_params as f64;
        let shared = out.shared_params as f64;
        for r in out.ledger.records() {
            match r.kind {
                PayloadKind::Base => assert!(r.nonzeros as f64 <= (0.3 * shared).ceil()),
                PayloadKind::Adaptive => assert!(r.nonzeros as f64 <= (0.03 * adaptive).ceil()),
                _ => {}
            }
        }
    }
}
