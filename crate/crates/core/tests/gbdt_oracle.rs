mod common;

use common::{brute_force_root, split_sse_gain, tiny_dataset};
use loopkit::trainer::{GbdtModel, GbdtParams, Loss};
use proptest::prelude::*;

fn stump() -> GbdtParams {
    GbdtParams { num_trees: 1, max_depth: 1, learning_rate: 1.0, min_leaf: 1 }
}

#[test]
fn root_split_is_the_exhaustive_maximizer() {
    for seed in 0..20 {
        let (x, y) = tiny_dataset(seed);
        let m = GbdtModel::fit(&x, &y, Loss::Squared, &stump());
        let (bf, bt, bg) = brute_force_root(&x, &y).unwrap();
        let (f, t, _) = m.trees[0].root_split().unwrap();
        let g = split_sse_gain(&x, &y, f, t);
        assert!((g - bg).abs() <= 1e-9 * bg.max(1.0), "seed {seed}: ({f}, {t}) gain {g} vs ({bf}, {bt}) {bg}");
    }
}

#[test]
fn constant_target_has_no_split() {
    let (x, _) = tiny_dataset(1);
    let y = vec![2.0; x.len()];
    assert!(brute_force_root(&x, &y).unwrap().2.abs() < 1e-12);
    assert!(GbdtModel::fit(&x, &y, Loss::Squared, &stump()).trees.is_empty());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn training_loss_never_increases(
        rows in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 20..120),
        logistic in any::<bool>(),
        lr in 0.05f64..1.0,
        depth in 1usize..5,
    ) {
        let y: Vec<f64> = rows.iter().map(|r| {
            let s = r[0] * r[1] - r[2];
            if logistic { f64::from(u8::from(s > 0.0)) } else { s }
        }).collect();
        let loss = if logistic { Loss::Logistic } else { Loss::Squared };
        let params = GbdtParams { num_trees: 30, max_depth: depth, learning_rate: lr, min_leaf: 1 };
        let (_, trace) = GbdtModel::fit_traced(&rows, &y, loss, &params);
        for w in trace.windows(2) {
            prop_assert!(w[1] <= w[0], "{trace:?}");
        }
    }
}
