//! A/B experiments over blueprint versions or treatment labels:
//! deterministic assignment, outcome logging, ATE and CATE estimation, and
//! personalized assignment from CATE models.

mod hte;
mod stats;

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use crate::clock::Millis;
use crate::error::{Error, Result};
use crate::hashing::{hash_parts, unit_interval};
use crate::policy::{evaluate_value, parse_policy, EvalContext, PolicyProgram};

pub use hte::{default_base_config, fit_hte, hte_assign, CateModel, CateParts, LearnerKind, MIN_ARM_ROWS};
pub use stats::{estimate_ate, AteResult, ArmSummary};

const BUCKETS: u64 = 1_000_000;
pub const DEFAULT_HTE_HOLDOUT: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArmTarget {
    Version(u32),
    Treatment(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub arm_id: String,
    pub target: ArmTarget,
    pub proportion: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Randomized,
    HteServing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentStatus {
    Active,
    Stopped,
}

/// What a caller supplies to create an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    #[serde(default)]
    pub experiment_id: Option<String>,
    pub usecase: String,
    pub arms: Vec<Arm>,
    #[serde(default)]
    pub salt: Option<String>,
    /// Defaults to the first arm.
    #[serde(default)]
    pub control_arm: Option<String>,
    /// Policy-language expression over the unit's labels, read with
    /// `pred("label")`, giving the per-decision outcome.
    pub metric: String,
    #[serde(default)]
    pub hte_holdout: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Experiment {
    pub experiment_id: String,
    pub usecase: String,
    pub arms: Vec<Arm>,
    pub salt: String,
    pub control_arm: String,
    pub metric: String,
    pub phase: Phase,
    pub status: ExperimentStatus,
    /// Share of units kept on randomized assignment during HTE serving.
    pub hte_holdout: f64,
    pub created_at: Millis,
}

impl Experiment {
    pub fn arm(&self, arm_id: &str) -> Option<&Arm> {
        self.arms.iter().find(|a| a.arm_id == arm_id)
    }

    /// Stateless bucket assignment through cumulative proportions.
    pub fn assign(&self, unit_id: &str) -> &Arm {
        let bucket = hash_parts(&[&self.salt, unit_id]) % BUCKETS;
        let mut edge = 0.0;
        for arm in &self.arms {
            edge += arm.proportion * BUCKETS as f64;
            if (bucket as f64) < edge {
                return arm;
            }
        }
        self.arms.last().expect("validated: at least two arms")
    }

    fn in_hte_holdout(&self, unit_id: &str) -> bool {
        unit_interval(hash_parts(&["hte-holdout", &self.salt, unit_id])) < self.hte_holdout
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub experiment_id: String,
    pub arm_id: String,
    pub target: ArmTarget,
    /// False when the arm came from CATE models rather than randomization.
    pub randomized: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRow {
    pub unit_id: String,
    pub arm_id: String,
    pub x: Vec<f64>,
    pub y: f64,
    pub randomized: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct OutcomeLog {
    pub rows: Vec<OutcomeRow>,
}

impl OutcomeLog {
    pub fn randomized_only(&self) -> OutcomeLog {
        OutcomeLog { rows: self.rows.iter().filter(|r| r.randomized).cloned().collect() }
    }
}

#[derive(Debug, Clone)]
struct Exposure {
    arm_id: String,
    x: Vec<f64>,
    randomized: bool,
    outcome_sum: f64,
    outcome_n: usize,
}

#[derive(Default)]
struct ExperimentState {
    exposures: BTreeMap<String, Exposure>,
    cate: Vec<CateModel>,
}

struct Entry {
    exp: Arc<Experiment>,
    metric: Arc<PolicyProgram>,
    state: Mutex<ExperimentState>,
}

pub fn validate_spec(spec: &ExperimentSpec) -> Result<()> {
    let mut p = Vec::new();
    if spec.arms.len() < 2 {
        p.push(format!("need at least 2 arms, got {}", spec.arms.len()));
    }
    let mut ids = std::collections::HashSet::new();
    for a in &spec.arms {
        if !(a.proportion > 0.0 && a.proportion < 1.0) {
            p.push(format!("arm `{}` proportion {} outside (0, 1)", a.arm_id, a.proportion));
        }
        if !ids.insert(a.arm_id.as_str()) {
            p.push(format!("duplicate arm `{}`", a.arm_id));
        }
    }
    let total: f64 = spec.arms.iter().map(|a| a.proportion).sum();
    if (total - 1.0).abs() > 1e-9 {
        p.push(format!("proportions sum to {total}, not 1"));
    }
    if let Some(c) = &spec.control_arm {
        if !ids.contains(c.as_str()) {
            p.push(format!("control arm `{c}` is not an arm"));
        }
    }
    if let Some(h) = spec.hte_holdout {
        if !(0.0..1.0).contains(&h) {
            p.push(format!("hte_holdout {h} outside [0, 1)"));
        }
    }
    if let Err(e) = parse_policy(&spec.metric) {
        p.push(format!("metric: {e}"));
    }
    if p.is_empty() {
        Ok(())
    } else {
        Err(Error::Validation(p))
    }
}

/// Experiments, their exposure/outcome logs and fitted CATE models. At most
/// one experiment per usecase is active.
#[derive(Default)]
pub struct ExperimentStore {
    entries: RwLock<HashMap<String, Arc<Entry>>>,
    counter: Mutex<u64>,
}

impl ExperimentStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn create(&self, spec: ExperimentSpec, now: Millis) -> Result<Arc<Experiment>> {
        validate_spec(&spec)?;
        let metric = Arc::new(parse_policy(&spec.metric)?);
        let mut entries = self.entries.write();
        if entries.values().any(|e| e.exp.usecase == spec.usecase && e.exp.status == ExperimentStatus::Active) {
            return Err(Error::State(format!("usecase `{}` already has an active experiment", spec.usecase)));
        }
        let id = match spec.experiment_id {
            Some(id) => id,
            None => {
                let mut c = self.counter.lock();
                loop {
                    *c += 1;
                    let id = format!("exp-{}", *c);
                    if !entries.contains_key(&id) {
                        break id;
                    }
                }
            }
        };
        if entries.contains_key(&id) {
            return Err(Error::duplicate("experiment", id));
        }
        let exp = Arc::new(Experiment {
            salt: spec.salt.unwrap_or_else(|| id.clone()),
            control_arm: spec.control_arm.unwrap_or_else(|| spec.arms[0].arm_id.clone()),
            experiment_id: id.clone(),
            usecase: spec.usecase,
            arms: spec.arms,
            metric: spec.metric,
            phase: Phase::Randomized,
            status: ExperimentStatus::Active,
            hte_holdout: spec.hte_holdout.unwrap_or(DEFAULT_HTE_HOLDOUT),
            created_at: now,
        });
        entries.insert(id, Arc::new(Entry { exp: exp.clone(), metric, state: Mutex::default() }));
        Ok(exp)
    }

    fn entry(&self, id: &str) -> Result<Arc<Entry>> {
        self.entries.read().get(id).cloned().ok_or_else(|| Error::not_found("experiment", id))
    }

    pub fn get(&self, id: &str) -> Result<Arc<Experiment>> {
        Ok(self.entry(id)?.exp.clone())
    }

    pub fn list(&self) -> Vec<Arc<Experiment>> {
        let mut v: Vec<_> = self.entries.read().values().map(|e| e.exp.clone()).collect();
        v.sort_by(|a, b| a.experiment_id.cmp(&b.experiment_id));
        v
    }

    pub fn active_for(&self, usecase: &str) -> Option<Arc<Experiment>> {
        self.entries
            .read()
            .values()
            .find(|e| e.exp.usecase == usecase && e.exp.status == ExperimentStatus::Active)
            .map(|e| e.exp.clone())
    }

    /// Randomized-phase assignment.
    pub fn assign(&self, experiment_id: &str, unit_id: &str) -> Result<String> {
        let exp = self.get(experiment_id)?;
        if exp.status != ExperimentStatus::Active {
            return Err(Error::State(format!("experiment `{experiment_id}` is not active")));
        }
        Ok(exp.assign(unit_id).arm_id.clone())
    }

    /// Assignment for serving. In HTE serving, units outside the holdout
    /// slice go to the arm with the best predicted lift for `covariates`.
    pub fn assign_unit(&self, exp: &Experiment, unit_id: &str, covariates: Option<&[f64]>) -> Result<Assignment> {
        if exp.status != ExperimentStatus::Active {
            return Err(Error::State(format!("experiment `{}` is not active", exp.experiment_id)));
        }
        let (arm, randomized) = match exp.phase {
            Phase::HteServing if !exp.in_hte_holdout(unit_id) => {
                let x = covariates.ok_or_else(|| Error::invalid("HTE serving needs covariates"))?;
                let entry = self.entry(&exp.experiment_id)?;
                let models = entry.state.lock().cate.clone();
                let arm_id = hte_assign(&models, &exp.control_arm, x)?;
                (exp.arm(&arm_id).ok_or_else(|| Error::not_found("arm", arm_id))?, false)
            }
            _ => (exp.assign(unit_id), true),
        };
        Ok(Assignment {
            experiment_id: exp.experiment_id.clone(),
            arm_id: arm.arm_id.clone(),
            target: arm.target.clone(),
            randomized,
        })
    }

    /// Records the first exposure of a unit; later exposures are ignored.
    pub fn record_exposure(&self, a: &Assignment, unit_id: &str, covariates: Vec<f64>) -> Result<()> {
        let entry = self.entry(&a.experiment_id)?;
        entry.state.lock().exposures.entry(unit_id.to_string()).or_insert(Exposure {
            arm_id: a.arm_id.clone(),
            x: covariates,
            randomized: a.randomized,
            outcome_sum: 0.0,
            outcome_n: 0,
        });
        Ok(())
    }

    /// Folds one decision's joined labels into the unit's outcome via the
    /// experiment metric. Returns false if the unit was never exposed or
    /// the metric cannot be evaluated on these labels.
    pub fn record_outcome(&self, experiment_id: &str, unit_id: &str, labels: &BTreeMap<String, f64>) -> Result<bool> {
        let entry = self.entry(experiment_id)?;
        let ctx = EvalContext { predictions: labels.clone(), ..EvalContext::default() };
        let Ok(y) = evaluate_value(&entry.metric, &ctx) else { return Ok(false) };
        let mut st = entry.state.lock();
        let Some(e) = st.exposures.get_mut(unit_id) else { return Ok(false) };
        e.outcome_sum += y;
        e.outcome_n += 1;
        Ok(true)
    }

    /// One row per exposed unit with at least one outcome; a unit's outcome
    /// is the mean metric over its decisions.
    pub fn outcome_log(&self, experiment_id: &str) -> Result<OutcomeLog> {
        let entry = self.entry(experiment_id)?;
        let st = entry.state.lock();
        Ok(OutcomeLog {
            rows: st
                .exposures
                .iter()
                .filter(|(_, e)| e.outcome_n > 0)
                .map(|(u, e)| OutcomeRow {
                    unit_id: u.clone(),
                    arm_id: e.arm_id.clone(),
                    x: e.x.clone(),
                    y: e.outcome_sum / e.outcome_n as f64,
                    randomized: e.randomized,
                })
                .collect(),
        })
    }

    /// ATE of `arm` against control, over randomized units only.
    pub fn ate(&self, experiment_id: &str, arm: Option<&str>) -> Result<AteResult> {
        let exp = self.get(experiment_id)?;
        let arm = match arm {
            Some(a) => a.to_string(),
            None => exp
                .arms
                .iter()
                .find(|a| a.arm_id != exp.control_arm)
                .map(|a| a.arm_id.clone())
                .expect("validated: at least two arms"),
        };
        estimate_ate(&self.outcome_log(experiment_id)?.randomized_only(), &arm, &exp.control_arm)
    }

    /// Fits one CATE model per non-control arm from randomized outcomes and
    /// moves the experiment to HTE serving.
    pub fn advance_phase(&self, experiment_id: &str, kind: LearnerKind, cfg: &crate::blueprint::ModelConfig) -> Result<Arc<Experiment>> {
        let entry = self.entry(experiment_id)?;
        if entry.exp.phase != Phase::Randomized {
            return Err(Error::State(format!("experiment `{experiment_id}` is already in HTE serving")));
        }
        let log = self.outcome_log(experiment_id)?.randomized_only();
        let models = entry
            .exp
            .arms
            .iter()
            .filter(|a| a.arm_id != entry.exp.control_arm)
            .map(|a| fit_hte(kind, &log, &a.arm_id, &entry.exp.control_arm, cfg))
            .collect::<Result<Vec<_>>>()?;
        let next = Arc::new(Experiment { phase: Phase::HteServing, ..(*entry.exp).clone() });
        let new_entry = Arc::new(Entry {
            exp: next.clone(),
            metric: entry.metric.clone(),
            state: Mutex::new(ExperimentState {
                exposures: std::mem::take(&mut entry.state.lock().exposures),
                cate: models,
            }),
        });
        self.entries.write().insert(experiment_id.to_string(), new_entry);
        Ok(next)
    }

    pub fn cate_models(&self, experiment_id: &str) -> Result<Vec<CateModel>> {
        Ok(self.entry(experiment_id)?.state.lock().cate.clone())
    }

    /// Predicted lift per non-control arm at `x`.
    pub fn predict_cate(&self, experiment_id: &str, x: &[f64]) -> Result<BTreeMap<String, f64>> {
        let models = self.cate_models(experiment_id)?;
        if models.is_empty() {
            return Err(Error::State(format!("experiment `{experiment_id}` has no CATE models")));
        }
        models.iter().map(|m| Ok((m.treated_arm.clone(), m.predict_cate(x)?))).collect()
    }

    pub fn stop(&self, experiment_id: &str) -> Result<Arc<Experiment>> {
        let mut entries = self.entries.write();
        let entry = entries.get(experiment_id).ok_or_else(|| Error::not_found("experiment", experiment_id))?;
        let next = Arc::new(Experiment { status: ExperimentStatus::Stopped, ..(*entry.exp).clone() });
        let new_entry = Arc::new(Entry {
            exp: next.clone(),
            metric: entry.metric.clone(),
            state: Mutex::new(std::mem::take(&mut *entry.state.lock())),
        });
        entries.insert(experiment_id.to_string(), new_entry);
        Ok(next)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn ab_spec(usecase: &str) -> ExperimentSpec {
        ExperimentSpec {
            experiment_id: None,
            usecase: usecase.into(),
            arms: vec![
                Arm { arm_id: "A".into(), target: ArmTarget::Version(1), proportion: 0.5 },
                Arm { arm_id: "B".into(), target: ArmTarget::Version(2), proportion: 0.5 },
            ],
            salt: Some("s1".into()),
            control_arm: None,
            metric: "score pred(\"click\");".into(),
            hte_holdout: None,
        }
    }

    #[test]
    fn deterministic_and_balanced() {
        let store = ExperimentStore::new();
        let exp = store.create(ab_spec("u"), 0).unwrap();
        assert_eq!(store.assign(&exp.experiment_id, "unit-7").unwrap(), store.assign(&exp.experiment_id, "unit-7").unwrap());
        let n = 100_000;
        let b = (0..n).filter(|i| exp.assign(&format!("u{i}")).arm_id == "B").count();
        let share = b as f64 / n as f64;
        assert!((share - 0.5).abs() < 0.01, "{share}");
    }

    #[test]
    fn salt_decorrelates() {
        let store = ExperimentStore::new();
        let a = store.create(ab_spec("u"), 0).unwrap();
        let mut spec = ab_spec("v");
        spec.salt = Some("other".into());
        let b = store.create(spec, 0).unwrap();
        let n = 20_000;
        let agree = (0..n).filter(|i| a.assign(&format!("u{i}")).arm_id == b.assign(&format!("u{i}")).arm_id).count();
        let rate = agree as f64 / n as f64;
        assert!((rate - 0.5).abs() < 0.02, "{rate}");
    }

    #[test]
    fn validation() {
        let store = ExperimentStore::new();
        let mut s = ab_spec("u");
        s.arms[0].proportion = 0.7;
        assert!(matches!(store.create(s, 0), Err(Error::Validation(_))));
        let mut s = ab_spec("u");
        s.arms.truncate(1);
        assert!(store.create(s, 0).is_err());
        let mut s = ab_spec("u");
        s.metric = "score ;".into();
        assert!(store.create(s, 0).is_err());
        store.create(ab_spec("u"), 0).unwrap();
        assert!(matches!(store.create(ab_spec("u"), 0), Err(Error::State(_))));
    }

    #[test]
    fn exposure_outcome_and_ate() {
        let store = ExperimentStore::new();
        let exp = store.create(ab_spec("u"), 0).unwrap();
        for i in 0..400 {
            let unit = format!("u{i}");
            let a = store.assign_unit(&exp, &unit, None).unwrap();
            store.record_exposure(&a, &unit, vec![i as f64]).unwrap();
            let click = if a.arm_id == "B" { 1.0 } else { 0.0 };
            assert!(store.record_outcome(&exp.experiment_id, &unit, &BTreeMap::from([("click".into(), click)])).unwrap());
        }
        // metric needs `click`
        assert!(!store.record_outcome(&exp.experiment_id, "u1", &BTreeMap::new()).unwrap());
        assert!(!store.record_outcome(&exp.experiment_id, "stranger", &BTreeMap::from([("click".into(), 1.0)])).unwrap());
        let ate = store.ate(&exp.experiment_id, None).unwrap();
        assert_eq!(ate.estimate, 1.0);
        assert_eq!(store.outcome_log(&exp.experiment_id).unwrap().rows.len(), 400);
    }

    #[test]
    fn hte_serving_routes_by_cate() {
        let store = ExperimentStore::new();
        let exp = store.create(ab_spec("u"), 0).unwrap();
        for i in 0..2_000 {
            let unit = format!("u{i}");
            let x = (i % 100) as f64 / 100.0;
            let a = store.assign_unit(&exp, &unit, None).unwrap();
            store.record_exposure(&a, &unit, vec![x]).unwrap();
            // B helps when x > 0.5 and hurts otherwise
            let y = match (a.arm_id.as_str(), x > 0.5) {
                ("B", true) => 1.0,
                ("B", false) => -1.0,
                _ => 0.0,
            };
            store.record_outcome(&exp.experiment_id, &unit, &BTreeMap::from([("click".into(), y)])).unwrap();
        }
        let exp = store.advance_phase(&exp.experiment_id, LearnerKind::T, &default_base_config()).unwrap();
        assert_eq!(exp.phase, Phase::HteServing);
        assert!(store.advance_phase(&exp.experiment_id, LearnerKind::T, &default_base_config()).is_err());
        let mut hte = 0;
        for i in 0..1_000 {
            let unit = format!("new{i}");
            let a = store.assign_unit(&exp, &unit, Some(&[0.9])).unwrap();
            if !a.randomized {
                hte += 1;
                assert_eq!(a.arm_id, "B");
            }
            let a = store.assign_unit(&exp, &unit, Some(&[0.1])).unwrap();
            if !a.randomized {
                assert_eq!(a.arm_id, "A");
            }
        }
        assert!((850..=950).contains(&hte), "{hte}");
        assert!(store.assign_unit(&exp, "new-x", None).is_err() || exp.in_hte_holdout("new-x"));
    }
}
