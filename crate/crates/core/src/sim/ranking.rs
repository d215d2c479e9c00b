//! Feed ranking with positional bias: an item at screen position `p` is
//! clicked with probability `r / (1 + p)`.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::json;

use super::{drive_loop, logistic, DayReport, DayTraffic, LoopApi, ScenarioConfig};
use crate::blueprint::{BlueprintDraft, LabelSpec, ModelConfig, ModelFamily, PolicyConfig, TaskKind};
use crate::clock::{Millis, MINUTE, SECOND};
use crate::error::Result;
use crate::features::{AppContext, FeatureRef, CONTEXT_GROUP};
use crate::policy::ExplorationConfig;
use crate::service::{DisplayRequest, ObservationBatch, RankingRequest};
use crate::space::DecisionSpace;

fn draft(cfg: &ScenarioConfig) -> BlueprintDraft {
    let mut features = vec![FeatureRef::new(CONTEXT_GROUP, "v0")];
    features.extend((1..cfg.theta.len()).map(|i| FeatureRef::new(CONTEXT_GROUP, &format!("i{}", i - 1))));
    BlueprintDraft {
        feature_config: features,
        label_config: vec![LabelSpec::online_binary("click")],
        model_config: ModelConfig {
            family: ModelFamily::Gbdt,
            task: TaskKind::BinaryClassification,
            num_trees: cfg.num_trees,
            max_depth: cfg.max_depth,
            learning_rate: 0.1,
            holdout_fraction: 0.1,
        },
        policy_config: PolicyConfig::new(r#"score pred("click");"#)
            .with_exploration(ExplorationConfig::epsilon_greedy(cfg.epsilon)),
        ttl_ms: 5 * MINUTE,
    }
}

/// Relevance of item `item` for viewer `v`: `theta[0]` weights the
/// viewer-item interaction on the first item attribute, the rest weight the
/// item attributes.
pub fn relevance(cfg: &ScenarioConfig, v: f64, item: &[f64]) -> f64 {
    let z = cfg.bias + cfg.theta[0] * v * item[0] + cfg.theta[1..].iter().zip(item).map(|(w, a)| w * a).sum::<f64>();
    logistic(z)
}

/// Expected clicks when items with relevance `r` are shown in `order`.
pub fn expected_clicks(r: &[f64], order: &[usize]) -> f64 {
    order.iter().enumerate().map(|(p, &i)| r[i] / (1.0 + p as f64)).sum()
}

pub fn run(api: &dyn LoopApi, cfg: &ScenarioConfig) -> Result<(Vec<DayReport>, BTreeMap<String, f64>)> {
    let u = &cfg.usecase;
    api.register_usecase(u, DecisionSpace::Ranking)?;
    let v = api.create_blueprint(u, &draft(cfg))?;
    api.activate(u, v)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.decisions_per_day;
    let k = cfg.candidates;
    let dims = cfg.theta.len() - 1;
    let step = (crate::clock::DAY - MINUTE) / n as Millis;
    let mut traffic = |day: u32, start: Millis, _end: Millis| -> Result<DayTraffic> {
        let mut out = DayTraffic::default();
        let (mut platform, mut oracle, mut unranked) = (0.0, 0.0, 0.0);
        for i in 0..n {
            let t = start + i as Millis * step;
            api.set_time(t);
            let viewer: f64 = StandardNormal.sample(&mut rng);
            let items: Vec<Vec<f64>> = (0..k).map(|_| (0..dims).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
            let r: Vec<f64> = items.iter().map(|it| relevance(cfg, viewer, it)).collect();
            let mut viewer_ctx = AppContext::new();
            viewer_ctx.insert("v0".into(), json!(viewer));
            let candidates = items
                .iter()
                .map(|it| it.iter().enumerate().map(|(j, a)| (format!("i{j}"), json!(a))).collect::<AppContext>())
                .collect();
            let id = format!("{u}-{day}-{i}");
            let resp = api.get_ranking(&RankingRequest { usecase_id: u.clone(), decision_id: id.clone(), viewer_context: viewer_ctx, candidates })?;
            let order: Vec<usize> = resp.items.iter().map(|it| it.index).collect();
            api.log_display(&DisplayRequest {
                decision_id: id,
                positions: resp.items.iter().enumerate().map(|(p, it)| (it.item_token.clone(), p as i64)).collect(),
            })?;
            for (p, it) in resp.items.iter().enumerate() {
                let click = rng.random::<f64>() < r[it.index] / (1.0 + p as f64);
                api.log_observations(&ObservationBatch {
                    decision_id: it.item_token.clone(),
                    observations: BTreeMap::from([("click".to_string(), f64::from(u8::from(click)))]),
                    observed_at: api.controls_clock().then_some(t + SECOND),
                })?;
            }
            let mut best: Vec<usize> = (0..k).collect();
            best.sort_by(|a, b| r[*b].total_cmp(&r[*a]));
            platform += expected_clicks(&r, &order);
            oracle += expected_clicks(&r, &best);
            unranked += expected_clicks(&r, &(0..k).collect::<Vec<_>>());
            out.null_decisions += usize::from(resp.model_id.is_none());
            if resp.model_id.is_some() {
                out.serving_model = resp.model_id;
            }
        }
        out.decisions = n;
        out.metrics = BTreeMap::from([
            ("expected_clicks".to_string(), platform / n as f64),
            ("oracle_clicks".to_string(), oracle / n as f64),
            ("unranked_clicks".to_string(), unranked / n as f64),
        ]);
        Ok(out)
    };
    let days = drive_loop(api, cfg, &mut traffic)?;
    let served: Vec<&DayReport> = days.iter().filter(|d| d.null_decisions == 0).collect();
    let mut summary = BTreeMap::new();
    if !served.is_empty() {
        for key in ["expected_clicks", "oracle_clicks", "unranked_clicks"] {
            summary.insert(key.to_string(), served.iter().map(|d| d.metrics[key]).sum::<f64>() / served.len() as f64);
        }
    }
    Ok((days, summary))
}
