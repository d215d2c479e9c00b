//! Prefetch: decide per request whether to fetch content ahead of a
//! possible click. Prefetching costs `cost`; a prefetched click is worth 1.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::json;

use super::{dot, drive_loop, logistic, DayReport, DayTraffic, LoopApi, ScenarioConfig};
use crate::blueprint::{Aggregation, BlueprintDraft, DelayClass, LabelSpec, ModelConfig, ModelFamily, PolicyConfig, TaskKind};
use crate::clock::{Millis, MINUTE, SECOND};
use crate::error::Result;
use crate::features::{AppContext, FeatureRef, CONTEXT_GROUP};
use crate::policy::ExplorationConfig;
use crate::service::{DecisionRequest, ObservationBatch};
use crate::space::{DecisionSpace, DecisionValue};

pub const DEFAULT_THRESHOLD: f64 = 0.3;

pub fn blueprint(cfg: &ScenarioConfig, threshold: f64) -> BlueprintDraft {
    BlueprintDraft {
        feature_config: (0..cfg.theta.len()).map(|i| FeatureRef::new(CONTEXT_GROUP, &format!("x{i}"))).collect(),
        label_config: vec![
            LabelSpec::online_binary("click"),
            LabelSpec::real("utility", Aggregation::Sum, DelayClass::Online),
        ],
        model_config: ModelConfig {
            family: ModelFamily::Gbdt,
            task: TaskKind::BinaryClassification,
            num_trees: cfg.num_trees,
            max_depth: cfg.max_depth,
            learning_rate: 0.1,
            holdout_fraction: 0.1,
        },
        policy_config: PolicyConfig::new(r#"decide pred("click") > param("threshold");"#)
            .with_param("threshold", threshold)
            .with_tunable("threshold", 0.0, 1.0)
            .with_exploration(if cfg.epsilon > 0.0 {
                ExplorationConfig::epsilon_greedy(cfg.epsilon)
            } else {
                ExplorationConfig::none()
            }),
        ttl_ms: 5 * MINUTE,
    }
}

/// Registers the usecase and activates the initial blueprint.
pub fn setup(api: &dyn LoopApi, cfg: &ScenarioConfig) -> Result<u32> {
    api.register_usecase(&cfg.usecase, DecisionSpace::Binary)?;
    let v = api.create_blueprint(&cfg.usecase, &blueprint(cfg, DEFAULT_THRESHOLD))?;
    api.activate(&cfg.usecase, v)?;
    Ok(v)
}

/// The seeded user population and click model.
pub struct World {
    rng: ChaCha8Rng,
    pub theta: Vec<f64>,
    pub bias: f64,
    pub cost: f64,
}

pub struct User {
    pub x: Vec<f64>,
    pub p_click: f64,
    pub click: bool,
}

impl World {
    pub fn new(cfg: &ScenarioConfig, stream: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)),
            theta: cfg.theta.clone(),
            bias: cfg.bias,
            cost: cfg.cost,
        }
    }

    pub fn draw(&mut self, shift: f64) -> User {
        let mut x: Vec<f64> = (0..self.theta.len()).map(|_| StandardNormal.sample(&mut self.rng)).collect();
        x[0] += shift;
        let p_click = logistic(dot(&self.theta, &x) + self.bias);
        let click = self.rng.random::<f64>() < p_click;
        User { x, p_click, click }
    }

    pub fn context(u: &User) -> AppContext {
        let mut ctx = AppContext::new();
        for (i, v) in u.x.iter().enumerate() {
            ctx.insert(format!("x{i}"), json!(v));
        }
        ctx
    }
}

/// Serves one request, logs its outcome and returns `(prefetched, null, model_id)`.
pub fn serve_one(api: &dyn LoopApi, usecase: &str, id: String, u: &User, cost: f64, t: Millis, ctx: AppContext) -> Result<(bool, bool, Option<String>)> {
    let resp = api.get_decision(&DecisionRequest { usecase_id: usecase.to_string(), decision_id: id.clone(), application_context: ctx })?;
    // a null decision falls back to the default action: never prefetch
    let prefetch = matches!(resp.decision, Some(DecisionValue::Boolean(true)));
    let click = f64::from(u8::from(u.click));
    let utility = if prefetch { click - cost } else { 0.0 };
    api.log_observations(&ObservationBatch {
        decision_id: id,
        observations: BTreeMap::from([("click".to_string(), click), ("utility".to_string(), utility)]),
        observed_at: api.controls_clock().then_some(t + SECOND),
    })?;
    Ok((prefetch, resp.decision.is_none(), resp.model_id))
}

pub fn run(api: &dyn LoopApi, cfg: &ScenarioConfig) -> Result<(Vec<DayReport>, BTreeMap<String, f64>)> {
    setup(api, cfg)?;
    let mut world = World::new(cfg, 1);
    let n = cfg.decisions_per_day;
    let step = (crate::clock::DAY - MINUTE) / n as Millis;
    let mut traffic = |day: u32, start: Millis, _end: Millis| -> Result<DayTraffic> {
        let shift = if cfg.drifted(day) { cfg.drift_shift } else { 0.0 };
        let mut t_out = DayTraffic::default();
        let (mut util, mut oracle, mut always, mut prefetches, mut hits) = (0.0, 0.0, 0.0, 0usize, 0usize);
        for i in 0..n {
            let t = start + i as Millis * step;
            api.set_time(t);
            let u = world.draw(shift);
            let ctx = World::context(&u);
            let (prefetch, null, model) =
                serve_one(api, &cfg.usecase, format!("{}-{day}-{i}", cfg.usecase), &u, cfg.cost, t, ctx)?;
            let gain = f64::from(u8::from(u.click)) - cfg.cost;
            if prefetch {
                util += gain;
                prefetches += 1;
                hits += usize::from(u.click);
            }
            if u.p_click > cfg.cost {
                oracle += gain;
            }
            always += gain;
            t_out.null_decisions += usize::from(null);
            if model.is_some() {
                t_out.serving_model = model;
            }
        }
        t_out.decisions = n;
        let per = |v: f64| v / n as f64;
        t_out.metrics = BTreeMap::from([
            ("utility".to_string(), per(util)),
            ("oracle_utility".to_string(), per(oracle)),
            ("always_utility".to_string(), per(always)),
            ("never_utility".to_string(), 0.0),
            ("prefetch_rate".to_string(), per(prefetches as f64)),
            ("hit_rate".to_string(), if prefetches > 0 { hits as f64 / prefetches as f64 } else { 0.0 }),
        ]);
        Ok(t_out)
    };
    let days = drive_loop(api, cfg, &mut traffic)?;
    Ok((days.clone(), summarize(&days)))
}

/// Utility totals over the days served entirely by a model.
pub fn summarize(days: &[DayReport]) -> BTreeMap<String, f64> {
    let served: Vec<&DayReport> = days.iter().filter(|d| d.null_decisions == 0 && d.serving_model.is_some()).collect();
    let mut s = BTreeMap::new();
    if served.is_empty() {
        return s;
    }
    let sum = |k: &str| served.iter().map(|d| d.metrics[k]).sum::<f64>() / served.len() as f64;
    let (u, o, a) = (sum("utility"), sum("oracle_utility"), sum("always_utility"));
    s.insert("post_model_days".into(), served.len() as f64);
    s.insert("utility".into(), u);
    s.insert("oracle_utility".into(), o);
    s.insert("always_utility".into(), a);
    s.insert("never_utility".into(), 0.0);
    s.insert("ratio_to_oracle".into(), u / o);
    s.insert(
        "min_daily_ratio".into(),
        served.iter().map(|d| d.metrics["utility"] / d.metrics["oracle_utility"]).fold(f64::INFINITY, f64::min),
    );
    s
}
