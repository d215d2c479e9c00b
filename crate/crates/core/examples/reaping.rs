//! Trains on 10 informative and 10 noise features, then reaps features by
//! permutation importance and publishes a canary on the reduced blueprint.

use std::collections::BTreeMap;

use loopkit::blueprint::{Aggregation, BlueprintDraft, DelayClass, LabelSpec, ModelConfig, PolicyConfig, TaskKind};
use loopkit::clock::{MINUTE, SECOND};
use loopkit::features::{AppContext, FeatureRef, CONTEXT_GROUP};
use loopkit::reaper::{reap, ReapParams};
use loopkit::service::{DecisionRequest, MaintenanceRequest, ObservationBatch, PlatformConfig};
use loopkit::sim::{InProcess, LoopApi, DEFAULT_START};
use loopkit::space::DecisionSpace;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

fn main() -> loopkit::Result<()> {
    let api = InProcess::new(PlatformConfig { min_eval_rows: 200, ..PlatformConfig::default() }, DEFAULT_START)?;
    api.register_usecase("score", DecisionSpace::Score)?;
    let draft = BlueprintDraft {
        feature_config: (0..20).map(|j| FeatureRef::new(CONTEXT_GROUP, &format!("f{j}"))).collect(),
        label_config: vec![LabelSpec::real("y", Aggregation::Last, DelayClass::Online)],
        model_config: ModelConfig { task: TaskKind::Regression, num_trees: 40, max_depth: 3, ..ModelConfig::default() },
        policy_config: PolicyConfig::new(r#"score pred("y");"#),
        ttl_ms: 5 * MINUTE,
    };
    let v = api.create_blueprint("score", &draft)?;
    api.activate("score", v)?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut feed = |n: usize, tag: &str| -> loopkit::Result<()> {
        for i in 0..n {
            let x: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y = x[..10].iter().sum::<f64>() + rng.random_range(-0.1..0.1);
            let ctx: AppContext = x.iter().enumerate().map(|(j, v)| (format!("f{j}"), json!(v))).collect();
            let t = api.clock.advance(SECOND);
            let id = format!("{tag}-{i}");
            api.get_decision(&DecisionRequest { usecase_id: "score".into(), decision_id: id.clone(), application_context: ctx })?;
            api.log_observations(&ObservationBatch { decision_id: id, observations: BTreeMap::from([("y".into(), y)]), observed_at: Some(t) })?;
        }
        Ok(())
    };
    feed(3_000, "a")?;
    let t = api.clock.advance(MINUTE);
    api.maintain("score", &MaintenanceRequest { now: Some(t), force_retrain: true, ..Default::default() })?;
    feed(500, "b")?;
    let t = api.clock.advance(MINUTE);
    api.maintain("score", &MaintenanceRequest { now: Some(t), ..Default::default() })?;

    let (report, _) = reap(&api.platform, "score", &ReapParams::default())?;
    println!("kept {} features: {:?}", report.kept.len(), report.kept);
    println!(
        "holdout metric {:.5} -> {:.5}; reduced blueprint v{:?}, canary {:?}",
        report.original_metric, report.final_metric, report.final_version, report.canary_id
    );
    Ok(())
}
