//! Properties of the file formats.

use fcl::config;
use fcl::streamfile::{decode, encode};
use fcl_core::data::{Split, Task, TaskStream};
use fcl_core::Tensor2;
use proptest::prelude::*;

fn split(rows: usize, cols: usize, classes: usize) -> impl Strategy<Value = Split> {
    (
        prop::collection::vec(-1e6f64..1e6, rows * cols),
        prop::collection::vec(0..classes, rows),
        prop::collection::vec(any::<u64>(), rows),
    )
        .prop_map(move |(x, labels, ids)| Split {
            x: Tensor2::new(rows, cols, x).unwrap(),
            labels,
            ids,
        })
}

fn task() -> impl Strategy<Value = Task> {
    (1usize..4, 2usize..4, 0usize..4, any::<u32>()).prop_flat_map(|(cols, k, rows, id)| {
        (
            prop::collection::vec(any::<u32>(), k),
            split(rows, cols, k),
            split(rows + 1, cols, k),
            split(rows, cols, k),
        )
            .prop_map(move |(classes, train, valid, test)| Task {
                id,
                classes,
                train,
                valid,
                test,
            })
    })
}

fn streams() -> impl Strategy<Value = Vec<TaskStream>> {
    prop::collection::vec(
        (any::<u32>(), prop::collection::vec(task(), 0..3)).prop_map(|(client, tasks)| TaskStream { client, tasks }),
        0..3,
    )
}

proptest! {
    #[test]
    fn stream_files_round_trip(s in streams()) {
        prop_assert_eq!(decode(&encode(&s).unwrap()).unwrap(), s);
    }

    #[test]
    fn truncated_stream_files_are_rejected(s in streams(), cut in 1usize..64) {
        let bytes = encode(&s).unwrap();
        let keep = bytes.len().saturating_sub(cut);
        prop_assert!(decode(&bytes[..keep]).is_err());
    }

    #[test]
    fn kappa_values_parse_exactly(k in 1e-6f64..=1.0) {
        let c = config::parse(&format!("[federation]\nkappa_base = {k}\n")).unwrap();
        prop_assert_eq!(c.experiment.federation.kappa_base, k);
    }

    #[test]
    fn out_of_range_kappa_names_the_field(k in prop_oneof![-10.0f64..=0.0, 1.0001f64..10.0]) {
        let e = config::parse(&format!("[federation]\nkappa_adaptive = {k}\n")).unwrap_err();
        prop_assert!(e.to_string().starts_with("federation.kappa_adaptive:"));
    }
}
