//! Two-arm experiment with heterogeneous effects: a randomized day, then a
//! day served by the fitted CATE models.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde_json::json;

use super::{drive_loop, DayReport, DayTraffic, LoopApi, ScenarioConfig};
use crate::blueprint::{Aggregation, BlueprintDraft, DelayClass, LabelSpec, ModelConfig, PolicyConfig, TaskKind};
use crate::clock::{Millis, MINUTE, SECOND};
use crate::error::{Error, Result};
use crate::experiments::{Arm, ArmTarget, ExperimentSpec, LearnerKind};
use crate::features::{AppContext, FeatureRef, CONTEXT_GROUP};
use crate::service::{DecisionRequest, ObservationBatch};
use crate::space::DecisionSpace;

fn draft(treat: f64) -> BlueprintDraft {
    BlueprintDraft {
        feature_config: vec![FeatureRef::new(CONTEXT_GROUP, "x0")],
        label_config: vec![LabelSpec::real("y", Aggregation::Sum, DelayClass::Online)],
        model_config: ModelConfig { task: TaskKind::Regression, ..ModelConfig::default() },
        policy_config: PolicyConfig::new(r#"decide param("treat") > 0;"#).with_param("treat", treat),
        ttl_ms: 5 * MINUTE,
    }
}

pub fn tau(cfg: &ScenarioConfig, x: f64) -> f64 {
    cfg.tau_slope * x + cfg.tau_intercept
}

pub fn run(api: &dyn LoopApi, cfg: &ScenarioConfig) -> Result<(Vec<DayReport>, BTreeMap<String, f64>)> {
    let u = &cfg.usecase;
    api.register_usecase(u, DecisionSpace::Binary)?;
    let control = api.create_blueprint(u, &draft(0.0))?;
    let treatment = api.create_blueprint(u, &draft(1.0))?;
    api.activate(u, control)?;
    let exp = api.create_experiment(&ExperimentSpec {
        experiment_id: Some(format!("{u}-exp")),
        usecase: u.clone(),
        arms: vec![
            Arm { arm_id: "control".into(), target: ArmTarget::Version(control), proportion: 0.5 },
            Arm { arm_id: "treatment".into(), target: ArmTarget::Version(treatment), proportion: 0.5 },
        ],
        salt: Some(format!("seed-{}", cfg.seed)),
        control_arm: Some("control".into()),
        metric: r#"score pred("y");"#.into(),
        hte_holdout: Some(0.1),
    })?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.noise).map_err(|e| Error::invalid(e.to_string()))?;
    let n = cfg.decisions_per_day;
    let step = (crate::clock::DAY - MINUTE) / n as Millis;
    let cfg_ = cfg.clone();
    let mut summary = BTreeMap::new();
    let mut traffic = |day: u32, start: Millis, _end: Millis| -> Result<DayTraffic> {
        let mut out = DayTraffic::default();
        if day == 1 {
            api.advance_phase(&exp, LearnerKind::X)?;
            let grid: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).collect();
            let mut se = 0.0;
            for x in &grid {
                let est = api.predict_cate(&exp, &[*x])?;
                se += (est.get("treatment").copied().unwrap_or(0.0) - tau(&cfg_, *x)).powi(2);
            }
            out.metrics.insert("cate_rmse".into(), (se / grid.len() as f64).sqrt());
        }
        let (mut realized, mut oracle, mut all_t, mut all_c, mut treated) = (0.0, 0.0, 0.0, 0.0, 0usize);
        for i in 0..n {
            let t = start + i as Millis * step;
            api.set_time(t);
            let x: f64 = rng.random();
            let eps = noise.sample(&mut rng);
            let unit = format!("unit-{day}-{i}");
            let mut ctx = AppContext::new();
            ctx.insert("x0".into(), json!(x));
            ctx.insert("unit_id".into(), json!(unit));
            let resp = api.get_decision(&DecisionRequest { usecase_id: u.clone(), decision_id: unit.clone(), application_context: ctx })?;
            let is_t = resp.blueprint_version == treatment;
            let effect = tau(&cfg_, x);
            let y = cfg_.alpha + if is_t { effect } else { 0.0 } + eps;
            api.log_observations(&ObservationBatch {
                decision_id: unit,
                observations: BTreeMap::from([("y".to_string(), y)]),
                observed_at: api.controls_clock().then_some(t + SECOND),
            })?;
            realized += y;
            oracle += cfg_.alpha + effect.max(0.0) + eps;
            all_t += cfg_.alpha + effect + eps;
            all_c += cfg_.alpha + eps;
            treated += usize::from(is_t);
            out.null_decisions += usize::from(resp.decision.is_none());
        }
        out.decisions = n;
        let per = |v: f64| v / n as f64;
        out.metrics.insert("mean_outcome".into(), per(realized));
        out.metrics.insert("oracle_outcome".into(), per(oracle));
        out.metrics.insert("treat_all_outcome".into(), per(all_t));
        out.metrics.insert("control_all_outcome".into(), per(all_c));
        out.metrics.insert("treated_share".into(), per(treated as f64));
        if day == 0 {
            let ate = api.ate(&exp)?;
            out.metrics.insert("ate".into(), ate.estimate);
            out.metrics.insert("ate_se".into(), ate.se);
            out.metrics.insert("ate_ci_low".into(), ate.ci_low);
            out.metrics.insert("ate_ci_high".into(), ate.ci_high);
            out.metrics.insert("true_ate".into(), tau(&cfg_, 0.5));
        }
        Ok(out)
    };
    let cfg_loop = ScenarioConfig { days: cfg.days.clamp(1, 2), retrain: false, ..cfg.clone() };
    let days = drive_loop(api, &cfg_loop, &mut traffic)?;
    if let Some(d0) = days.first() {
        for k in ["ate", "ate_se", "true_ate"] {
            summary.insert(k.to_string(), d0.metrics[k]);
        }
    }
    if let Some(d1) = days.get(1) {
        let m = &d1.metrics;
        let best = m["treat_all_outcome"].max(m["control_all_outcome"]);
        summary.insert("cate_rmse".into(), m["cate_rmse"]);
        summary.insert("hte_outcome".into(), m["mean_outcome"]);
        summary.insert("best_single_arm_outcome".into(), best);
        summary.insert("oracle_outcome".into(), m["oracle_outcome"]);
        if m["oracle_outcome"] > best {
            summary.insert("captured_advantage".into(), (m["mean_outcome"] - best) / (m["oracle_outcome"] - best));
        }
    }
    Ok((days, summary))
}
