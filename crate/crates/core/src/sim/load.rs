//! Concurrent-load mode for measuring `get_decision` throughput.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::api::InProcess;
use super::{dot, logistic, LoopApi, DEFAULT_START};
use crate::blueprint::{BlueprintDraft, LabelSpec, ModelConfig, PolicyConfig};
use crate::clock::{MINUTE, SECOND};
use crate::error::{Error, Result};
use crate::features::{AppContext, FeatureRef, CONTEXT_GROUP};
use crate::service::{DecisionRequest, MaintenanceRequest, ObservationBatch, Platform, PlatformConfig, StagingMode};
use crate::space::DecisionSpace;

pub const LOAD_USECASE: &str = "load";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadReport {
    pub threads: usize,
    pub requests: usize,
    pub errors: usize,
    pub null_decisions: u64,
    pub elapsed_ms: f64,
    pub per_second: f64,
}

fn contexts(n: usize, features: usize, rng: &mut ChaCha8Rng) -> Vec<AppContext> {
    (0..n)
        .map(|_| (0..features).map(|j| (format!("f{j}"), json!(rng.random_range(-1.0..1.0)))).collect())
        .collect()
}

/// A platform serving a `trees`-tree GBDT over `features` context features,
/// trained and promoted through the regular loop.
pub fn trained_platform(features: usize, trees: usize, seed: u64) -> Result<InProcess> {
    let config = PlatformConfig { staging: StagingMode::Background, min_eval_rows: 200, ..PlatformConfig::default() };
    let api = InProcess::new(config, DEFAULT_START)?;
    api.register_usecase(LOAD_USECASE, DecisionSpace::Binary)?;
    let draft = BlueprintDraft {
        feature_config: (0..features).map(|j| FeatureRef::new(CONTEXT_GROUP, &format!("f{j}"))).collect(),
        label_config: vec![LabelSpec::online_binary("click")],
        model_config: ModelConfig { num_trees: trees, max_depth: 4, ..ModelConfig::default() },
        policy_config: PolicyConfig::new(r#"decide pred("click") > 0.5;"#),
        ttl_ms: 5 * MINUTE,
    };
    let v = api.create_blueprint(LOAD_USECASE, &draft)?;
    api.activate(LOAD_USECASE, v)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..features).map(|_| rng.random_range(-1.0..1.0)).collect();
    let feed = |rounds: usize, tag: &str, rng: &mut ChaCha8Rng| -> Result<()> {
        for (i, ctx) in contexts(rounds, features, rng).into_iter().enumerate() {
            let t = api.clock.advance(SECOND);
            let x: Vec<f64> = (0..features).map(|j| ctx[&format!("f{j}")].as_f64().unwrap_or(0.0)).collect();
            let click = rng.random::<f64>() < logistic(dot(&w, &x));
            let id = format!("{tag}-{i}");
            api.get_decision(&DecisionRequest { usecase_id: LOAD_USECASE.into(), decision_id: id.clone(), application_context: ctx })?;
            api.log_observations(&ObservationBatch {
                decision_id: id,
                observations: BTreeMap::from([("click".to_string(), f64::from(u8::from(click)))]),
                observed_at: Some(t + 1),
            })?;
        }
        Ok(())
    };
    feed(3_000, "train", &mut rng)?;
    let t = api.clock.advance(MINUTE);
    api.maintain(LOAD_USECASE, &MaintenanceRequest { now: Some(t), force_retrain: true, ..Default::default() })?;
    feed(1_000, "shadow", &mut rng)?;
    let t = api.clock.advance(MINUTE);
    let m = api.maintain(LOAD_USECASE, &MaintenanceRequest { now: Some(t), ..Default::default() })?;
    if m.production_model.is_none() {
        return Err(Error::State(format!("load model was not promoted: {:?}", m.canaries)));
    }
    Ok(api)
}

/// Issues `requests` decisions from `threads` threads as fast as possible.
pub fn concurrent_load(platform: &Platform, usecase: &str, features: usize, threads: usize, requests: usize, seed: u64) -> LoadReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool = contexts(1_024, features, &mut rng);
    let next = AtomicUsize::new(0);
    let errors = AtomicUsize::new(0);
    let before = platform.stats().null_decisions;
    let started = Instant::now();
    std::thread::scope(|s| {
        for th in 0..threads.max(1) {
            let (pool, next, errors) = (&pool, &next, &errors);
            s.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= requests {
                    break;
                }
                let req = DecisionRequest {
                    usecase_id: usecase.to_string(),
                    decision_id: format!("load-{seed}-{th}-{i}"),
                    application_context: pool[i % pool.len()].clone(),
                };
                if platform.get_decision(&req).is_err() {
                    errors.fetch_add(1, Ordering::Relaxed);
                }
            });
        }
    });
    let secs = started.elapsed().as_secs_f64();
    platform.sync_staging();
    LoadReport {
        threads: threads.max(1),
        requests,
        errors: errors.into_inner(),
        null_decisions: platform.stats().null_decisions - before,
        elapsed_ms: secs * 1e3,
        per_second: requests as f64 / secs,
    }
}
