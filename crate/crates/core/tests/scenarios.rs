use loopkit::service::PlatformConfig;
use loopkit::sim::tune::{tune_prefetch, TuneConfig};
use loopkit::sim::{run_scenario, InProcess, ScenarioConfig, ScenarioKind, DEFAULT_START};

fn in_process() -> InProcess {
    InProcess::new(PlatformConfig::default(), DEFAULT_START).unwrap()
}

#[test]
fn hte_ab_beats_both_single_arms() {
    let cfg = ScenarioConfig { seed: 4, ..ScenarioConfig::new(ScenarioKind::HteAb) };
    let r = run_scenario(&in_process(), &cfg).unwrap();
    let s = &r.summary;
    assert!(s["hte_outcome"] > s["best_single_arm_outcome"], "{s:?}");
    assert!(s["captured_advantage"] >= 0.5, "{s:?}");
    // the randomized phase estimates the true average effect
    let d0 = &r.days[0].metrics;
    assert!((d0["ate"] - d0["true_ate"]).abs() < 4.0 * d0["ate_se"], "{d0:?}");
}

#[test]
fn ranking_orders_better_than_input_order() {
    let cfg = ScenarioConfig { days: 4, decisions_per_day: 2_000, seed: 8, ..ScenarioConfig::new(ScenarioKind::Ranking) };
    let r = run_scenario(&in_process(), &cfg).unwrap();
    let s = &r.summary;
    assert!(s["expected_clicks"] > s["unranked_clicks"], "{s:?}");
    assert!(s["expected_clicks"] <= s["oracle_clicks"] + 1e-9, "{s:?}");
}

#[test]
fn prefetch_run_is_reproducible() {
    let cfg = ScenarioConfig { days: 3, decisions_per_day: 2_000, seed: 9, ..ScenarioConfig::new(ScenarioKind::Prefetch) };
    let a = run_scenario(&in_process(), &cfg).unwrap();
    let b = run_scenario(&in_process(), &cfg).unwrap();
    assert_eq!(a.days, b.days);
    assert_eq!(a.summary, b.summary);
}

#[test]
fn tuning_finds_a_threshold_near_the_cost() {
    let out = tune_prefetch(&TuneConfig::prefetch(12, 3)).unwrap();
    assert_eq!(out.trials.len(), 12);
    let best = out.best.as_ref().expect("a best trial").params["threshold"];
    assert!((best - out.oracle_threshold).abs() <= 0.15, "best {best} vs oracle {}", out.oracle_threshold);
}
