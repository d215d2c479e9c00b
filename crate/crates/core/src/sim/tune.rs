//! Blueprint tuning against the prefetch environment: each trial is a
//! two-arm experiment between production and a candidate parameter set.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::api::InProcess;
use super::prefetch::{self, serve_one, World};
use super::{drive_loop, DayTraffic, LoopApi, ScenarioConfig, ScenarioKind};
use crate::clock::{Millis, DAY, MINUTE};
use crate::error::{Error, Result};
use crate::optimizer::{suggest, Observation, ParamSpace, Trial, TrialRunner};
use crate::service::PlatformConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneConfig {
    pub scenario: ScenarioConfig,
    pub space: ParamSpace,
    pub budget: usize,
    pub seed: u64,
    pub decisions_per_trial: usize,
    /// Days of plain traffic before the first trial, so that a model is
    /// serving.
    pub warmup_days: u32,
    pub ledger: Option<PathBuf>,
}

impl TuneConfig {
    pub fn prefetch(budget: usize, seed: u64) -> Self {
        Self {
            scenario: ScenarioConfig { decisions_per_day: 5_000, seed, ..ScenarioConfig::new(ScenarioKind::Prefetch) },
            space: ParamSpace::new(&[("threshold", 0.0, 1.0)]),
            budget,
            seed,
            decisions_per_trial: 5_000,
            warmup_days: 2,
            ledger: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneReport {
    pub trials: Vec<Trial>,
    pub best: Option<Trial>,
    /// Oracle threshold for the environment: prefetch iff p(click) > cost.
    pub oracle_threshold: f64,
}

pub const TRIAL_METRIC: &str = r#"score pred("utility");"#;

pub fn tune_prefetch(cfg: &TuneConfig) -> Result<TuneReport> {
    cfg.scenario.validate()?;
    cfg.space.validate()?;
    let sc = ScenarioConfig { days: cfg.warmup_days.max(2), ..cfg.scenario.clone() };
    let api = InProcess::new(PlatformConfig::default(), sc.start)?;
    prefetch::setup(&api, &sc)?;
    let mut world = World::new(&sc, 1);
    let n = sc.decisions_per_day;
    let step = (DAY - MINUTE) / n as Millis;
    let mut warm = |day: u32, start: Millis, _end: Millis| -> Result<DayTraffic> {
        for i in 0..n {
            let t = start + i as Millis * step;
            api.set_time(t);
            let u = world.draw(0.0);
            let ctx = World::context(&u);
            serve_one(&api, &sc.usecase, format!("warm-{day}-{i}"), &u, sc.cost, t, ctx)?;
        }
        Ok(DayTraffic { decisions: n, ..DayTraffic::default() })
    };
    drive_loop(&api, &sc, &mut warm)?;
    if api.platform.registry.production(&sc.usecase).is_none() {
        return Err(Error::State("no model was promoted during warm-up".into()));
    }

    let runner = TrialRunner::new(1, cfg.ledger.clone());
    let mut history: Vec<Observation> = Vec::new();
    let mut t = sc.start + sc.days as Millis * DAY;
    let trial_step = MINUTE.min(DAY / cfg.decisions_per_trial.max(1) as Millis).max(1);
    for k in 0..cfg.budget {
        let x = suggest(&history, &cfg.space, cfg.seed)?;
        api.set_time(t);
        let trial = runner.run_trial(&api.platform, &sc.usecase, &cfg.space, &x, TRIAL_METRIC)?;
        for i in 0..cfg.decisions_per_trial {
            t += trial_step;
            api.set_time(t);
            let u = world.draw(0.0);
            let ctx = World::context(&u);
            serve_one(&api, &sc.usecase, format!("trial-{k}-{i}"), &u, sc.cost, t, ctx)?;
        }
        t += MINUTE;
        api.set_time(t);
        api.platform.flush(t);
        let done = runner.complete_trial(&api.platform, trial.trial_id)?;
        let v = done.metrics["value"];
        log::info!("trial {k}: {:?} -> {:.4} ± {:.4}", done.params, v.mean, v.se);
        history.push(Observation { x, value: v.mean, se: v.se });
    }
    let trials = runner.completed();
    let best = trials.iter().max_by(|a, b| a.metrics["value"].mean.total_cmp(&b.metrics["value"].mean)).cloned();
    Ok(TuneReport { trials, best, oracle_threshold: sc.cost })
}
