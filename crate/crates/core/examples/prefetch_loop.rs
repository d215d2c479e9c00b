//! Runs the simulated prefetch loop in-process: traffic is served with null
//! decisions until the first model is trained and promoted, then the daily
//! utility is compared with the always/never baselines and the oracle.
//!
//! cargo run --release --example prefetch_loop -- [days] [decisions_per_day]

use loopkit::service::PlatformConfig;
use loopkit::sim::{run_scenario, InProcess, ScenarioConfig, ScenarioKind, DEFAULT_START};

fn main() -> loopkit::Result<()> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<u64>().expect("numeric argument"));
    let base = ScenarioConfig::new(ScenarioKind::Prefetch);
    let cfg = ScenarioConfig {
        days: args.next().map_or(5, |d| d as u32),
        decisions_per_day: args.next().map_or(5_000, |n| n as usize),
        ..base
    };
    let api = InProcess::new(PlatformConfig::default(), DEFAULT_START)?;
    let report = run_scenario(&api, &cfg)?;
    for d in &report.days {
        println!(
            "day {:>2}  nulls {:>5}  model {:<28} utility {:.4}  oracle {:.4}",
            d.day,
            d.null_decisions,
            d.serving_model.as_deref().unwrap_or("-"),
            d.metrics.get("utility").copied().unwrap_or(f64::NAN),
            d.metrics.get("oracle_utility").copied().unwrap_or(f64::NAN),
        );
    }
    println!("{}", serde_json::to_string_pretty(&report.summary).unwrap());
    Ok(())
}
