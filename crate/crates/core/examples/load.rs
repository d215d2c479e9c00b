//! Concurrent get_decision load against a 100-tree model over 50 features.

use loopkit::sim::load::{concurrent_load, trained_platform, LOAD_USECASE};

fn main() -> loopkit::Result<()> {
    let api = trained_platform(50, 100, 1)?;
    let r = concurrent_load(&api.platform, LOAD_USECASE, 50, 8, 40_000, 2);
    println!("{}", serde_json::to_string_pretty(&r).unwrap());
    Ok(())
}
