//! Bayesian optimization: a GP/EI loop on a one-dimensional function, then
//! tuning the prefetch decision threshold against the simulator.

use loopkit::optimizer::{suggest, Observation, ParamSpace};
use loopkit::sim::tune::{tune_prefetch, TuneConfig};

fn main() -> loopkit::Result<()> {
    let f = |x: f64| -(x - 0.3) * (x - 0.3);
    let space = ParamSpace::new(&[("x", 0.0, 1.0)]);
    let mut history: Vec<Observation> = Vec::new();
    for i in 0..12 {
        let x = suggest(&history, &space, 5)?;
        let value = f(x[0]);
        println!("trial {i:>2}  x {:.4}  f {value:+.5}", x[0]);
        history.push(Observation { x, value, se: 0.0 });
    }

    let report = tune_prefetch(&TuneConfig::prefetch(10, 7))?;
    for t in &report.trials {
        println!("threshold {:.3}  {:?}", t.params["threshold"], t.status);
    }
    if let Some(best) = &report.best {
        println!("best threshold {:.3}, oracle {:.3}", best.params["threshold"], report.oracle_threshold);
    }
    Ok(())
}
