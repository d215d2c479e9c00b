//! Population stability index between a baseline and a shifted window.

use loopkit::registry::{check_drift, Window};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn window(seed: u64, shift: f64) -> Window {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let features = (0..5_000)
        .map(|_| {
            let a: f64 = StandardNormal.sample(&mut rng);
            let b: f64 = StandardNormal.sample(&mut rng);
            vec![a + shift, b]
        })
        .collect();
    Window { start: 0, end: 1, features, predictions: vec![] }
}

fn main() -> loopkit::Result<()> {
    let slots = vec!["latency".to_string(), "size".to_string()];
    let baseline = window(1, 0.0);
    for shift in [0.0, 0.25, 0.5, 1.0, 2.0] {
        let r = check_drift(&slots, &baseline, &window(2, shift))?;
        let psi: Vec<String> = r.features.iter().map(|f| format!("{}={:.3}", f.slot, f.psi)).collect();
        println!("shift {shift:.2} sd  psi [{}]  alerts {:?}", psi.join(", "), r.alerts());
    }
    Ok(())
}
