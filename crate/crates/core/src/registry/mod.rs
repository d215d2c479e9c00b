//! Model lifecycle: publish as canary, shadow evaluation, promotion,
//! rollback, and drift reports.
//!
//! Reads go through an immutable snapshot that writers replace whole, so a
//! reader sees either the old or the new production model and never a mix.

pub mod drift;

use std::collections::{BTreeMap, HashMap};
use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use crate::blueprint::ModelFamily;
use crate::clock::Millis;
use crate::error::{Error, Result};
use crate::hashing::{hash_parts, unit_interval};
use crate::joiner::TrainingRow;
use crate::trainer::{primary_metric, Model, TaskMetrics};

pub use drift::{check_drift, DriftReport, FeatureDrift, PredictionDrift, Window, PSI_ALERT, PSI_BUCKETS};

pub const DEFAULT_MIN_EVAL_ROWS: usize = 1_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelState {
    Canary,
    Production,
    Retired,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub model_id: String,
    pub usecase: String,
    pub blueprint_version: u32,
    pub family: ModelFamily,
    pub state: ModelState,
    pub offline_metrics: BTreeMap<String, TaskMetrics>,
    pub published_at: Millis,
    /// Primary metric from the shadow evaluation that promoted it.
    pub shadow_metric: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShadowSummary {
    pub canary_id: String,
    pub production_id: Option<String>,
    pub rows: usize,
    pub canary_metric: f64,
    pub production_metric: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromotionOutcome {
    Promoted,
    Retained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum RegistryEvent {
    Published { model_id: String, usecase: String, at: Millis },
    Promoted { model_id: String, previous: Option<String>, metric: Option<f64>, at: Millis },
    Rejected { model_id: String, at: Millis },
    RolledBack { usecase: String, reinstated: Option<String>, retired: Option<String>, at: Millis },
}

#[derive(Clone)]
struct Entry {
    artifact: ModelArtifact,
    model: Arc<Model>,
}

/// Immutable view of the registry at one instant.
#[derive(Clone, Default)]
pub struct Snapshot {
    models: HashMap<String, Entry>,
    production: HashMap<String, String>,
    /// Ex-production model ids per usecase, most recent last.
    history: HashMap<String, Vec<String>>,
}

impl Snapshot {
    pub fn production(&self, usecase: &str) -> Option<Arc<Model>> {
        self.production.get(usecase).map(|id| self.models[id].model.clone())
    }

    pub fn production_id(&self, usecase: &str) -> Option<&str> {
        self.production.get(usecase).map(String::as_str)
    }

    pub fn artifact(&self, id: &str) -> Option<&ModelArtifact> {
        self.models.get(id).map(|e| &e.artifact)
    }

    pub fn model(&self, id: &str) -> Option<Arc<Model>> {
        self.models.get(id).map(|e| e.model.clone())
    }

    /// Artifacts of a usecase ordered by publish time then id.
    pub fn artifacts(&self, usecase: &str) -> Vec<ModelArtifact> {
        let mut v: Vec<ModelArtifact> =
            self.models.values().filter(|e| e.artifact.usecase == usecase).map(|e| e.artifact.clone()).collect();
        v.sort_by(|a, b| (a.published_at, &a.model_id).cmp(&(b.published_at, &b.model_id)));
        v
    }

    pub fn canaries(&self, usecase: &str) -> Vec<Arc<Model>> {
        self.artifacts(usecase)
            .iter()
            .filter(|a| a.state == ModelState::Canary)
            .map(|a| self.models[&a.model_id].model.clone())
            .collect()
    }

    /// Model ids in `state` for a usecase.
    pub fn in_state(&self, usecase: &str, state: ModelState) -> Vec<String> {
        self.artifacts(usecase).into_iter().filter(|a| a.state == state).map(|a| a.model_id).collect()
    }
}

pub struct Registry {
    snapshot: RwLock<Arc<Snapshot>>,
    /// Serializes transitions; readers never take it.
    write: Mutex<()>,
    shadow: Mutex<HashMap<String, ShadowSummary>>,
    events: Mutex<Vec<RegistryEvent>>,
    log_path: Option<PathBuf>,
    min_eval_rows: usize,
}

impl Default for Registry {
    fn default() -> Self {
        Self::new()
    }
}

impl Registry {
    pub fn new() -> Self {
        Self {
            snapshot: RwLock::new(Arc::new(Snapshot::default())),
            write: Mutex::new(()),
            shadow: Mutex::new(HashMap::new()),
            events: Mutex::new(Vec::new()),
            log_path: None,
            min_eval_rows: DEFAULT_MIN_EVAL_ROWS,
        }
    }

    pub fn with_min_eval_rows(mut self, n: usize) -> Self {
        self.min_eval_rows = n;
        self
    }

    /// Registry whose events are appended to `log`; existing events are
    /// replayed using `load` to fetch model files.
    pub fn open(log: &Path, load: &dyn Fn(&str, &str) -> Result<Model>) -> Result<Self> {
        let mut events = Vec::new();
        if log.exists() {
            for line in BufReader::new(std::fs::File::open(log)?).lines() {
                let line = line?;
                if !line.trim().is_empty() {
                    events.push(serde_json::from_str(&line)?);
                }
            }
        }
        let mut reg = Self::replay(&events, load)?;
        reg.log_path = Some(log.to_path_buf());
        Ok(reg)
    }

    /// Rebuilds state from an event log. `load(usecase, model_id)` returns
    /// the model published under that id.
    pub fn replay(events: &[RegistryEvent], load: &dyn Fn(&str, &str) -> Result<Model>) -> Result<Self> {
        let reg = Self::new();
        for e in events {
            match e {
                RegistryEvent::Published { model_id, usecase, at } => {
                    let model = load(usecase, model_id)?;
                    reg.apply_publish(model, BTreeMap::new(), *at)?;
                }
                RegistryEvent::Promoted { model_id, metric, .. } => reg.apply_promote(model_id, *metric)?,
                RegistryEvent::Rejected { model_id, .. } => reg.apply_reject(model_id)?,
                RegistryEvent::RolledBack { usecase, .. } => {
                    reg.apply_rollback(usecase)?;
                }
            }
        }
        *reg.events.lock() = events.to_vec();
        Ok(reg)
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.snapshot.read().clone()
    }

    pub fn production(&self, usecase: &str) -> Option<Arc<Model>> {
        self.snapshot().production(usecase)
    }

    pub fn events(&self) -> Vec<RegistryEvent> {
        self.events.lock().clone()
    }

    fn record(&self, e: RegistryEvent) -> Result<()> {
        if let Some(p) = &self.log_path {
            let mut f = OpenOptions::new().create(true).append(true).open(p)?;
            let mut line = serde_json::to_vec(&e)?;
            line.push(b'\n');
            f.write_all(&line)?;
        }
        self.events.lock().push(e);
        Ok(())
    }

    fn update(&self, f: impl FnOnce(&mut Snapshot) -> Result<()>) -> Result<()> {
        let mut next = (*self.snapshot()).clone();
        f(&mut next)?;
        *self.snapshot.write() = Arc::new(next);
        Ok(())
    }

    pub fn publish(&self, model: Model, offline_metrics: BTreeMap<String, TaskMetrics>, now: Millis) -> Result<String> {
        let _w = self.write.lock();
        let (id, usecase) = (model.model_id.clone(), model.usecase.clone());
        self.apply_publish(model, offline_metrics, now)?;
        self.record(RegistryEvent::Published { model_id: id.clone(), usecase, at: now })?;
        Ok(id)
    }

    fn apply_publish(&self, model: Model, offline_metrics: BTreeMap<String, TaskMetrics>, now: Millis) -> Result<()> {
        model.validate()?;
        self.update(|s| {
            if s.models.contains_key(&model.model_id) {
                return Err(Error::duplicate("model", &model.model_id));
            }
            let artifact = ModelArtifact {
                model_id: model.model_id.clone(),
                usecase: model.usecase.clone(),
                blueprint_version: model.blueprint_version,
                family: model.family,
                state: ModelState::Canary,
                offline_metrics,
                published_at: now,
                shadow_metric: None,
            };
            s.models.insert(model.model_id.clone(), Entry { artifact, model: Arc::new(model) });
            Ok(())
        })
    }

    /// Scores a canary and the current production model on the same sampled
    /// rows. `project` maps a row onto a model's inputs, or `None` when the
    /// row cannot feed that model.
    pub fn shadow_evaluate(
        &self,
        canary_id: &str,
        rows: &[TrainingRow],
        sample_fraction: f64,
        project: &dyn Fn(&Model, &TrainingRow) -> Option<Vec<f64>>,
    ) -> Result<ShadowSummary> {
        if !(sample_fraction > 0.0 && sample_fraction <= 1.0) {
            return Err(Error::invalid(format!("sample_fraction {sample_fraction} outside (0, 1]")));
        }
        let snap = self.snapshot();
        let entry = snap.models.get(canary_id).ok_or_else(|| Error::not_found("model", canary_id))?;
        if entry.artifact.state != ModelState::Canary {
            return Err(Error::State(format!("model `{canary_id}` is not a canary")));
        }
        let canary = &entry.model;
        let prod = snap.production(&entry.artifact.usecase);
        let (mut cx, mut px, mut labels) = (Vec::new(), Vec::new(), Vec::new());
        for r in rows {
            if r.usecase != entry.artifact.usecase
                || unit_interval(hash_parts(&["shadow", &r.decision_id])) >= sample_fraction
                || !canary.heads.iter().any(|h| r.labels.contains_key(&h.label))
            {
                continue;
            }
            let Some(c) = project(canary, r) else { continue };
            if let Some(p) = &prod {
                let Some(p) = project(p, r) else { continue };
                px.push(p);
            }
            cx.push(c);
            labels.push(r.labels.clone());
        }
        let canary_metric = primary_metric(canary, &cx, &labels)
            .ok_or_else(|| Error::InsufficientData("no joined rows in the evaluation window".into()))?;
        let production_metric = prod.as_ref().and_then(|p| primary_metric(p, &px, &labels));
        let summary = ShadowSummary {
            canary_id: canary_id.to_string(),
            production_id: prod.map(|p| p.model_id.clone()),
            rows: cx.len(),
            canary_metric,
            production_metric,
        };
        self.shadow.lock().insert(canary_id.to_string(), summary.clone());
        Ok(summary)
    }

    pub fn shadow_summary(&self, canary_id: &str) -> Option<ShadowSummary> {
        self.shadow.lock().get(canary_id).cloned()
    }

    /// Promotes a canary whose shadow metric is strictly better than
    /// production's on the same rows; otherwise retires the canary.
    pub fn promote_if_better(&self, canary_id: &str, now: Millis) -> Result<PromotionOutcome> {
        let _w = self.write.lock();
        let snap = self.snapshot();
        let entry = snap.models.get(canary_id).ok_or_else(|| Error::not_found("model", canary_id))?;
        if entry.artifact.state != ModelState::Canary {
            return Err(Error::State(format!("model `{canary_id}` is not a canary")));
        }
        let summary = self
            .shadow_summary(canary_id)
            .ok_or_else(|| Error::InsufficientData(format!("model `{canary_id}` has no shadow evaluation")))?;
        if summary.rows < self.min_eval_rows {
            return Err(Error::InsufficientData(format!(
                "{} evaluation rows, need {}",
                summary.rows, self.min_eval_rows
            )));
        }
        let current = snap.production_id(&entry.artifact.usecase).map(str::to_string);
        if current != summary.production_id {
            return Err(Error::State("production changed since the shadow evaluation".into()));
        }
        let better = match summary.production_metric {
            None => current.is_none(),
            Some(p) => summary.canary_metric < p,
        };
        if better {
            self.apply_promote(canary_id, Some(summary.canary_metric))?;
            self.record(RegistryEvent::Promoted {
                model_id: canary_id.to_string(),
                previous: current,
                metric: Some(summary.canary_metric),
                at: now,
            })?;
            Ok(PromotionOutcome::Promoted)
        } else {
            self.apply_reject(canary_id)?;
            self.record(RegistryEvent::Rejected { model_id: canary_id.to_string(), at: now })?;
            Ok(PromotionOutcome::Retained)
        }
    }

    fn apply_promote(&self, id: &str, metric: Option<f64>) -> Result<()> {
        self.update(|s| {
            let usecase = s.models.get(id).ok_or_else(|| Error::not_found("model", id))?.artifact.usecase.clone();
            if let Some(prev) = s.production.insert(usecase.clone(), id.to_string()) {
                s.models.get_mut(&prev).expect("production model registered").artifact.state = ModelState::Retired;
                s.history.entry(usecase).or_default().push(prev);
            }
            let a = &mut s.models.get_mut(id).expect("checked").artifact;
            a.state = ModelState::Production;
            a.shadow_metric = metric;
            Ok(())
        })
    }

    fn apply_reject(&self, id: &str) -> Result<()> {
        self.update(|s| {
            s.models.get_mut(id).ok_or_else(|| Error::not_found("model", id))?.artifact.state = ModelState::Retired;
            Ok(())
        })
    }

    /// Reinstates the most recent ex-production model. With no history the
    /// current production model is withdrawn, leaving the usecase on null
    /// decisions, and `NothingToRollback` is returned.
    pub fn rollback(&self, usecase: &str, now: Millis) -> Result<String> {
        let _w = self.write.lock();
        let (reinstated, retired) = self.apply_rollback(usecase)?;
        self.record(RegistryEvent::RolledBack {
            usecase: usecase.to_string(),
            reinstated: reinstated.clone(),
            retired,
            at: now,
        })?;
        reinstated.ok_or_else(|| Error::NothingToRollback(usecase.to_string()))
    }

    fn apply_rollback(&self, usecase: &str) -> Result<(Option<String>, Option<String>)> {
        let mut out = (None, None);
        self.update(|s| {
            let current = s.production.remove(usecase);
            if let Some(c) = &current {
                s.models.get_mut(c).expect("registered").artifact.state = ModelState::Retired;
            }
            let previous = s.history.get_mut(usecase).and_then(Vec::pop);
            if let Some(p) = &previous {
                s.models.get_mut(p).expect("registered").artifact.state = ModelState::Production;
                s.production.insert(usecase.to_string(), p.clone());
            }
            out = (previous, current);
            Ok(())
        })?;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blueprint::LabelKind;
    use crate::trainer::{GbdtModel, Head, HeadModel, Loss, MODEL_FORMAT_VERSION};

    pub(crate) fn constant_model(id: &str, p: f64) -> Model {
        Model {
            format_version: MODEL_FORMAT_VERSION,
            model_id: id.into(),
            usecase: "u".into(),
            blueprint_version: 1,
            family: ModelFamily::Gbdt,
            slot_names: vec!["x".into()],
            heads: vec![Head {
                label: "click".into(),
                kind: LabelKind::Binary,
                model: HeadModel::Gbdt(GbdtModel::constant(Loss::Logistic, (p / (1.0 - p)).ln(), 1)),
            }],
        }
    }

    fn rows(n: usize, rate: f64) -> Vec<TrainingRow> {
        (0..n)
            .map(|i| TrainingRow {
                decision_id: format!("d{i}"),
                usecase: "u".into(),
                blueprint_version: 1,
                features: vec![0.0],
                missing_mask: vec![false],
                predictions: BTreeMap::new(),
                labels: BTreeMap::from([("click".into(), f64::from((i as f64) < rate * n as f64))]),
                defaulted: vec![],
                explored: false,
                position: None,
                ts: 0,
            })
            .collect()
    }

    fn project(_: &Model, r: &TrainingRow) -> Option<Vec<f64>> {
        Some(r.features.clone())
    }

    fn evaluate_and_promote(reg: &Registry, id: &str, data: &[TrainingRow]) -> Result<PromotionOutcome> {
        reg.shadow_evaluate(id, data, 1.0, &project)?;
        reg.promote_if_better(id, 0)
    }

    #[test]
    fn lifecycle() {
        let reg = Registry::new();
        let data = rows(2_000, 0.3);
        reg.publish(constant_model("m1", 0.5), BTreeMap::new(), 0).unwrap();
        assert!(reg.production("u").is_none());
        // bootstrap: no production model
        assert_eq!(evaluate_and_promote(&reg, "m1", &data).unwrap(), PromotionOutcome::Promoted);
        reg.publish(constant_model("m2", 0.3), BTreeMap::new(), 1).unwrap();
        assert_eq!(evaluate_and_promote(&reg, "m2", &data).unwrap(), PromotionOutcome::Promoted);
        let snap = reg.snapshot();
        assert_eq!(snap.production_id("u"), Some("m2"));
        assert_eq!(snap.artifact("m1").unwrap().state, ModelState::Retired);
        // a worse canary is retired and production kept
        reg.publish(constant_model("m3", 0.6), BTreeMap::new(), 2).unwrap();
        assert_eq!(evaluate_and_promote(&reg, "m3", &data).unwrap(), PromotionOutcome::Retained);
        assert_eq!(reg.snapshot().artifact("m3").unwrap().state, ModelState::Retired);
        assert_eq!(reg.rollback("u", 3).unwrap(), "m1");
        assert!(matches!(reg.rollback("u", 4), Err(Error::NothingToRollback(_))));
        assert!(reg.production("u").is_none());
    }

    #[test]
    fn ties_retain_production() {
        let reg = Registry::new();
        let data = rows(2_000, 0.3);
        reg.publish(constant_model("a", 0.3), BTreeMap::new(), 0).unwrap();
        evaluate_and_promote(&reg, "a", &data).unwrap();
        reg.publish(constant_model("b", 0.3), BTreeMap::new(), 1).unwrap();
        let s = reg.shadow_evaluate("b", &data, 1.0, &project).unwrap();
        assert_eq!(Some(s.canary_metric), s.production_metric);
        assert_eq!(reg.promote_if_better("b", 0).unwrap(), PromotionOutcome::Retained);
    }

    #[test]
    fn eval_floor_and_errors() {
        let reg = Registry::new();
        reg.publish(constant_model("a", 0.3), BTreeMap::new(), 0).unwrap();
        assert!(matches!(reg.publish(constant_model("a", 0.3), BTreeMap::new(), 0), Err(Error::Duplicate { .. })));
        assert!(matches!(evaluate_and_promote(&reg, "a", &rows(500, 0.3)), Err(Error::InsufficientData(_))));
        assert!(matches!(reg.shadow_evaluate("a", &[], 1.0, &project), Err(Error::InsufficientData(_))));
        let mut bad = constant_model("bad", 0.3);
        bad.slot_names.clear();
        assert!(matches!(reg.publish(bad, BTreeMap::new(), 0), Err(Error::Validation(_))));
    }

    #[test]
    fn sample_fraction_binomial() {
        let reg = Registry::new();
        reg.publish(constant_model("a", 0.3), BTreeMap::new(), 0).unwrap();
        let s = reg.shadow_evaluate("a", &rows(10_000, 0.3), 0.1, &project).unwrap();
        // sd = 30
        assert!((900..=1_100).contains(&s.rows), "{}", s.rows);
    }

    #[test]
    fn replay_reconstructs_state() {
        let dir = tempfile::tempdir().unwrap();
        let log = dir.path().join("registry.ndjson");
        let models: HashMap<String, Model> =
            [("m1", 0.5), ("m2", 0.3), ("m3", 0.6)].iter().map(|(id, p)| (id.to_string(), constant_model(id, *p))).collect();
        let load = |_: &str, id: &str| models.get(id).cloned().ok_or_else(|| Error::not_found("model", id));
        let data = rows(2_000, 0.3);
        {
            let reg = Registry::open(&log, &load).unwrap();
            for (i, id) in ["m1", "m2", "m3"].iter().enumerate() {
                reg.publish(models[*id].clone(), BTreeMap::new(), i as Millis).unwrap();
                evaluate_and_promote(&reg, id, &data).unwrap();
            }
            reg.rollback("u", 9).unwrap();
        }
        let reg = Registry::open(&log, &load).unwrap();
        let snap = reg.snapshot();
        assert_eq!(snap.production_id("u"), Some("m1"));
        assert_eq!(snap.artifact("m2").unwrap().state, ModelState::Retired);
        assert_eq!(snap.artifact("m3").unwrap().state, ModelState::Retired);
        assert_eq!(reg.events().len(), 7);
    }
}
