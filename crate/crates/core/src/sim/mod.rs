//! Synthetic product environments and the daily loop driver: traffic
//! against the decision API, then flush, canary evaluation, retraining and
//! drift checks at each day boundary.

pub mod api;
pub mod hte_ab;
pub mod load;
pub mod prefetch;
pub mod ranking;
pub mod remote;
pub mod tune;

use std::collections::BTreeMap;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::clock::{Millis, DAY};
use crate::error::{Error, Result};
use crate::registry::PromotionOutcome;
use crate::service::MaintenanceRequest;

pub use api::{InProcess, LoopApi};
pub use remote::Remote;

/// 2024-01-01T00:00:00Z, the default simulated epoch.
pub const DEFAULT_START: Millis = 1_704_067_200_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Prefetch,
    HteAb,
    Ranking,
}

impl FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prefetch" => Ok(ScenarioKind::Prefetch),
            "hte_ab" | "hte" => Ok(ScenarioKind::HteAb),
            "ranking" => Ok(ScenarioKind::Ranking),
            _ => Err(Error::invalid(format!("unknown scenario `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub kind: ScenarioKind,
    pub usecase: String,
    pub seed: u64,
    pub days: u32,
    pub decisions_per_day: usize,
    /// Ground-truth coefficients of the click (or relevance) model.
    pub theta: Vec<f64>,
    pub bias: f64,
    /// Prefetch cost per prefetched request; a hit is worth 1.
    pub cost: f64,
    /// Outcome model of `hte_ab`: `y = alpha + (tau_slope * x + tau_intercept) * t + noise`.
    pub alpha: f64,
    pub tau_slope: f64,
    pub tau_intercept: f64,
    pub noise: f64,
    /// Ranking candidates per request.
    pub candidates: usize,
    pub retrain: bool,
    /// From this day on, covariate 0 is shifted by `drift_shift`.
    pub drift_day: Option<u32>,
    pub drift_shift: f64,
    pub epsilon: f64,
    pub num_trees: usize,
    pub max_depth: usize,
    pub start: Millis,
}

impl ScenarioConfig {
    pub fn new(kind: ScenarioKind) -> Self {
        let base = Self {
            kind,
            usecase: String::new(),
            seed: 0,
            days: 10,
            decisions_per_day: 20_000,
            theta: vec![1.2, -0.8, 0.6, 0.0],
            bias: -0.7,
            cost: 0.3,
            alpha: 1.0,
            tau_slope: 2.0,
            tau_intercept: -1.0,
            noise: 0.5,
            candidates: 5,
            retrain: true,
            drift_day: None,
            drift_shift: 2.0,
            epsilon: 0.0,
            num_trees: 50,
            max_depth: 3,
            start: DEFAULT_START,
        };
        match kind {
            ScenarioKind::Prefetch => Self { usecase: "prefetch".into(), ..base },
            ScenarioKind::HteAb => Self { usecase: "hte_ab".into(), days: 2, decisions_per_day: 10_000, ..base },
            ScenarioKind::Ranking => Self {
                usecase: "ranking".into(),
                days: 5,
                decisions_per_day: 4_000,
                theta: vec![1.5, -1.0, 0.8],
                bias: 0.0,
                epsilon: 0.05,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut p = Vec::new();
        if self.usecase.is_empty() {
            p.push("usecase is empty".to_string());
        }
        if self.days == 0 {
            p.push("days must be positive".into());
        }
        if self.decisions_per_day == 0 {
            p.push("decisions_per_day must be positive".into());
        }
        if self.theta.is_empty() {
            p.push("theta is empty".into());
        }
        if !(self.cost > 0.0 && self.cost < 1.0) {
            p.push(format!("cost {} outside (0, 1)", self.cost));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            p.push(format!("noise {} is invalid", self.noise));
        }
        if self.kind == ScenarioKind::Ranking && self.candidates < 2 {
            p.push("ranking needs at least 2 candidates".into());
        }
        if self.kind == ScenarioKind::Ranking && self.theta.len() < 2 {
            p.push("ranking needs one viewer and at least one item coefficient".into());
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            p.push(format!("epsilon {} outside [0, 1]", self.epsilon));
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(p))
        }
    }

    fn drifted(&self, day: u32) -> bool {
        self.drift_day.is_some_and(|d| day >= d)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayReport {
    pub day: u32,
    pub decisions: usize,
    pub null_decisions: usize,
    /// Model serving at the start of the day.
    pub serving_model: Option<String>,
    pub published: Option<String>,
    pub promoted: Vec<String>,
    pub drift_alert: Option<bool>,
    pub max_psi: Option<f64>,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub scenario: ScenarioKind,
    pub seed: u64,
    pub days: Vec<DayReport>,
    /// First day whose traffic was served entirely by a promoted model.
    pub first_model_day: Option<u32>,
    pub summary: BTreeMap<String, f64>,
    pub elapsed_ms: u64,
}

/// What one day of scenario traffic produced.
#[derive(Debug, Default)]
pub struct DayTraffic {
    pub decisions: usize,
    pub null_decisions: usize,
    pub serving_model: Option<String>,
    pub metrics: BTreeMap<String, f64>,
}

pub fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Runs `traffic` for each day, then the end-of-day maintenance pass.
pub fn drive_loop(
    api: &dyn LoopApi,
    cfg: &ScenarioConfig,
    traffic: &mut dyn FnMut(u32, Millis, Millis) -> Result<DayTraffic>,
) -> Result<Vec<DayReport>> {
    let mut out = Vec::new();
    let mut windows: Vec<(Millis, Millis)> = Vec::new();
    for day in 0..cfg.days {
        let day_start = cfg.start + day as Millis * DAY;
        let day_end = day_start + DAY;
        api.set_time(day_start);
        let w_start = api.now()?;
        let t = traffic(day, day_start, day_end)?;
        api.set_time(day_end);
        let w_end = api.now()? + 1;
        windows.push((w_start, w_end));
        let req = MaintenanceRequest {
            now: api.controls_clock().then_some(day_end),
            retrain: cfg.retrain,
            force_retrain: false,
            drift_baseline: (day > 0).then(|| windows[0]),
            drift_current: (day > 0).then_some((w_start, w_end)),
        };
        let m = api.maintain(&cfg.usecase, &req)?;
        log::info!(
            "day {day}: {} decisions, {} null, published {:?}, production {:?}",
            t.decisions,
            t.null_decisions,
            m.published,
            m.production_model
        );
        out.push(DayReport {
            day,
            decisions: t.decisions,
            null_decisions: t.null_decisions,
            serving_model: t.serving_model,
            published: m.published,
            promoted: m
                .canaries
                .iter()
                .filter(|c| c.outcome == Some(PromotionOutcome::Promoted))
                .map(|c| c.model_id.clone())
                .collect(),
            drift_alert: m.drift.as_ref().map(|d| d.alert),
            max_psi: m.drift.as_ref().map(|d| d.features.iter().map(|f| f.psi).fold(0.0, f64::max)),
            metrics: t.metrics,
        });
    }
    Ok(out)
}

/// Runs a scenario end to end.
pub fn run_scenario(api: &dyn LoopApi, cfg: &ScenarioConfig) -> Result<SimReport> {
    cfg.validate()?;
    let started = Instant::now();
    let (days, summary) = match cfg.kind {
        ScenarioKind::Prefetch => prefetch::run(api, cfg)?,
        ScenarioKind::HteAb => hte_ab::run(api, cfg)?,
        ScenarioKind::Ranking => ranking::run(api, cfg)?,
    };
    let first_model_day = days.iter().find(|d| d.null_decisions == 0 && d.serving_model.is_some()).map(|d| d.day);
    Ok(SimReport {
        scenario: cfg.kind,
        seed: cfg.seed,
        days,
        first_model_day,
        summary,
        elapsed_ms: started.elapsed().as_millis() as u64,
    })
}
