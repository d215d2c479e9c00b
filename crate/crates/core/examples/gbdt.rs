//! Fits gradient-boosted trees and a logistic baseline on XOR data and
//! prints the per-round training loss.

use loopkit::trainer::{GbdtModel, GbdtParams, LinearModel, Loss};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x: Vec<Vec<f64>> = (0..2_000).map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
    let y: Vec<f64> = x.iter().map(|r| f64::from(u8::from(r[0] * r[1] > 0.0))).collect();
    let (tx, hx) = x.split_at(1_500);
    let (ty, hy) = y.split_at(1_500);

    let params = GbdtParams { num_trees: 50, ..GbdtParams::default() };
    let (gbdt, trace) = GbdtModel::fit_traced(tx, ty, Loss::Logistic, &params);
    let linear = LinearModel::fit(tx, ty, Loss::Logistic);
    let acc = |f: &dyn Fn(&[f64]) -> f64| {
        hx.iter().zip(hy).filter(|(x, y)| (f(x) >= 0.5) == (**y == 1.0)).count() as f64 / hy.len() as f64
    };
    for (round, loss) in trace.iter().enumerate().step_by(10) {
        println!("round {round:>3}  logloss {loss:.4}");
    }
    if let Some((f, t, _)) = gbdt.trees[0].root_split() {
        println!("first tree splits feature {f} at {t:.3}");
    }
    println!("holdout accuracy: gbdt {:.3}, logistic {:.3}", acc(&|x| gbdt.predict(x)), acc(&|x| linear.predict(x)));
}
