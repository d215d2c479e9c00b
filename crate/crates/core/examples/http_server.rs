//! Starts the HTTP API on an ephemeral port and drives a short prefetch
//! simulation against it through the JSON endpoints.

use loopkit::http::router;
use loopkit::service::{Platform, PlatformConfig};
use loopkit::sim::{run_scenario, Remote, ScenarioConfig, ScenarioKind};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let platform = Platform::new(PlatformConfig::default())?;
    let rt = tokio::runtime::Runtime::new()?;
    let listener = rt.block_on(tokio::net::TcpListener::bind("127.0.0.1:0"))?;
    let addr = listener.local_addr()?;
    rt.spawn(async move { axum::serve(listener, router(platform)).await });
    println!("serving on http://{addr}");

    let remote = Remote::new(&format!("http://{addr}"))?;
    let cfg = ScenarioConfig { days: 3, decisions_per_day: 2_000, ..ScenarioConfig::new(ScenarioKind::Prefetch) };
    let report = run_scenario(&remote, &cfg)?;
    for d in &report.days {
        println!("day {}  decisions {}  nulls {}  model {:?}", d.day, d.decisions, d.null_decisions, d.serving_model);
    }
    println!("{}", serde_json::to_string_pretty(&report.summary)?);
    Ok(())
}
