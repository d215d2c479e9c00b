//! Immutable, versioned strategy blueprints and the subset rule that lets
//! one version train on rows produced by another.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use crate::clock::Millis;
use crate::error::{Error, Result};
use crate::experiments::{Assignment, ExperimentStore};
use crate::features::FeatureRef;
use crate::policy::{parse_policy, ExplorationConfig};
use crate::space::DecisionSpace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelKind {
    Binary,
    Real,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Last,
    Sum,
    Max,
    Any,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DelayClass {
    Online,
    Delayed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSpec {
    pub name: String,
    pub value_kind: LabelKind,
    pub aggregation: Aggregation,
    pub delay_class: DelayClass,
}

impl LabelSpec {
    pub fn online_binary(name: &str) -> Self {
        Self {
            name: name.to_string(),
            value_kind: LabelKind::Binary,
            aggregation: Aggregation::Any,
            delay_class: DelayClass::Online,
        }
    }

    pub fn real(name: &str, aggregation: Aggregation, delay_class: DelayClass) -> Self {
        Self { name: name.to_string(), value_kind: LabelKind::Real, aggregation, delay_class }
    }

    /// Checks a value against the label's kind (binary accepts only 0/1).
    pub fn accepts(&self, v: f64) -> bool {
        match self.value_kind {
            LabelKind::Binary => v == 0.0 || v == 1.0,
            LabelKind::Real => v.is_finite(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelFamily {
    Gbdt,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    BinaryClassification,
    Regression,
    /// One head per label, sharing the feature vector.
    Multitask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub family: ModelFamily,
    pub task: TaskKind,
    pub num_trees: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub holdout_fraction: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            family: ModelFamily::Gbdt,
            task: TaskKind::BinaryClassification,
            num_trees: 100,
            max_depth: 4,
            learning_rate: 0.1,
            holdout_fraction: 0.2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut p = Vec::new();
        if !(1..=5_000).contains(&self.num_trees) {
            p.push(format!("num_trees {} outside [1, 5000]", self.num_trees));
        }
        if !(1..=16).contains(&self.max_depth) {
            p.push(format!("max_depth {} outside [1, 16]", self.max_depth));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            p.push(format!("learning_rate {} outside (0, 1]", self.learning_rate));
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            p.push(format!("holdout_fraction {} outside (0, 1)", self.holdout_fraction));
        }
        p
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamBounds {
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub dsl_source: String,
    #[serde(default)]
    pub parameters: BTreeMap<String, f64>,
    /// Bounds for parameters the optimizer may tune.
    #[serde(default)]
    pub tunable: BTreeMap<String, ParamBounds>,
    #[serde(default)]
    pub exploration: ExplorationConfig,
}

impl PolicyConfig {
    pub fn new(dsl_source: &str) -> Self {
        Self {
            dsl_source: dsl_source.to_string(),
            parameters: BTreeMap::new(),
            tunable: BTreeMap::new(),
            exploration: ExplorationConfig::none(),
        }
    }

    pub fn with_param(mut self, name: &str, value: f64) -> Self {
        self.parameters.insert(name.to_string(), value);
        self
    }

    pub fn with_tunable(mut self, name: &str, lower: f64, upper: f64) -> Self {
        self.tunable.insert(name.to_string(), ParamBounds { lower, upper });
        self
    }

    pub fn with_exploration(mut self, exploration: ExplorationConfig) -> Self {
        self.exploration = exploration;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlueprintStatus {
    Draft,
    Live,
    Retired,
}

pub const DEFAULT_TTL_MS: Millis = 5 * crate::clock::MINUTE;

fn default_ttl() -> Millis {
    DEFAULT_TTL_MS
}

/// The editable part of a blueprint; versioning fields are assigned by the
/// store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlueprintDraft {
    pub feature_config: Vec<FeatureRef>,
    pub label_config: Vec<LabelSpec>,
    #[serde(default)]
    pub model_config: ModelConfig,
    pub policy_config: PolicyConfig,
    /// Join window for decisions served under this blueprint.
    #[serde(default = "default_ttl")]
    pub ttl_ms: Millis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyBlueprint {
    pub usecase_id: String,
    pub version: u32,
    pub decision_space: DecisionSpace,
    pub feature_config: Vec<FeatureRef>,
    pub label_config: Vec<LabelSpec>,
    pub model_config: ModelConfig,
    pub policy_config: PolicyConfig,
    pub ttl_ms: Millis,
    pub created_at: Millis,
    pub status: BlueprintStatus,
}

impl StrategyBlueprint {
    pub fn to_draft(&self) -> BlueprintDraft {
        BlueprintDraft {
            feature_config: self.feature_config.clone(),
            label_config: self.label_config.clone(),
            model_config: self.model_config.clone(),
            policy_config: self.policy_config.clone(),
            ttl_ms: self.ttl_ms,
        }
    }

    pub fn label(&self, name: &str) -> Option<&LabelSpec> {
        self.label_config.iter().find(|l| l.name == name)
    }

    /// Labels the model predicts, in head order.
    pub fn task_labels(&self) -> Vec<&LabelSpec> {
        match self.model_config.task {
            TaskKind::Multitask => self.label_config.iter().collect(),
            _ => self.label_config.iter().take(1).collect(),
        }
    }

    /// Encoded slot count, including the trailing position input of ranking
    /// usecases.
    pub fn model_slot_count(&self) -> usize {
        crate::features::slot_count(&self.feature_config)
            + usize::from(self.decision_space == DecisionSpace::Ranking)
    }
}

/// Subset rule: `consumer` may train on data produced under `producer` iff
/// its features and labels (by name and kind) are subsets of the producer's.
pub fn check_compatibility(consumer: &StrategyBlueprint, producer: &StrategyBlueprint) -> Result<bool> {
    if consumer.usecase_id != producer.usecase_id {
        return Err(Error::UsecaseMismatch(consumer.usecase_id.clone(), producer.usecase_id.clone()));
    }
    let features_ok = consumer.feature_config.iter().all(|f| producer.feature_config.contains(f));
    let labels_ok = consumer.label_config.iter().all(|l| {
        producer
            .label_config
            .iter()
            .any(|p| p.name == l.name && p.value_kind == l.value_kind)
    });
    Ok(features_ok && labels_ok)
}

/// Validates a draft; returns every problem found.
pub fn validate_draft(
    draft: &BlueprintDraft,
    space: DecisionSpace,
    has_group: &dyn Fn(&str) -> bool,
) -> Vec<String> {
    let mut p = Vec::new();

    let mut names = HashSet::new();
    for f in &draft.feature_config {
        if !names.insert(f.name.as_str()) {
            p.push(format!("feature `{}` listed twice", f.name));
        }
        if !has_group(&f.group) {
            p.push(format!("feature group `{}` does not exist", f.group));
        }
        if let Some(t) = &f.transform {
            if let Err(e) = t.validate() {
                p.push(format!("feature `{}`: {e}", f.name));
            }
        }
    }
    if draft.feature_config.iter().any(|f| f.name == crate::joiner::POSITION_FEATURE) {
        p.push(format!("`{}` is reserved", crate::joiner::POSITION_FEATURE));
    }

    let mut labels = HashSet::new();
    for l in &draft.label_config {
        if !labels.insert(l.name.as_str()) {
            p.push(format!("label `{}` listed twice", l.name));
        }
    }
    if draft.label_config.is_empty() {
        p.push("at least one label is required".into());
    }

    p.extend(draft.model_config.validate());
    if let Some(first) = draft.label_config.first() {
        match (draft.model_config.task, first.value_kind) {
            (TaskKind::BinaryClassification, LabelKind::Real) => {
                p.push(format!("binary_classification task needs a binary label, `{}` is real", first.name))
            }
            (TaskKind::Regression, LabelKind::Binary) => {
                p.push(format!("regression task needs a real label, `{}` is binary", first.name))
            }
            _ => {}
        }
    }

    if draft.ttl_ms <= 0 {
        p.push("ttl_ms must be positive".into());
    }

    let pc = &draft.policy_config;
    match parse_policy(&pc.dsl_source) {
        Ok(program) => {
            for param in &program.parameters {
                if !pc.parameters.contains_key(param) {
                    p.push(format!("policy references undeclared parameter `{param}`"));
                }
            }
            let slots: HashSet<String> =
                crate::features::slot_names(&draft.feature_config).into_iter().collect();
            for f in &program.features {
                if !slots.contains(f) {
                    p.push(format!("policy references unknown feature slot `{f}`"));
                }
            }
            for pred in &program.predictions {
                if !labels.contains(pred.as_str()) {
                    p.push(format!("policy references prediction `{pred}` with no label"));
                }
            }
            let terminal_ok = match (space, program.kind()) {
                (DecisionSpace::Ranking | DecisionSpace::Score, crate::policy::TerminalKind::Score) => true,
                (DecisionSpace::Binary | DecisionSpace::Choice { .. }, crate::policy::TerminalKind::Decide) => true,
                _ => false,
            };
            if !terminal_ok {
                p.push(format!("{space} usecases need a {} statement", match space {
                    DecisionSpace::Ranking | DecisionSpace::Score => "`score`",
                    _ => "`decide`",
                }));
            }
        }
        Err(e) => p.push(format!("policy: {e}")),
    }
    for (name, b) in &pc.tunable {
        match pc.parameters.get(name) {
            None => p.push(format!("tunable `{name}` is not a declared parameter")),
            Some(v) => {
                if !(b.lower < b.upper) {
                    p.push(format!("tunable `{name}` bounds need lower < upper"));
                } else if !(b.lower..=b.upper).contains(v) {
                    p.push(format!("parameter `{name}` = {v} outside its bounds"));
                }
            }
        }
    }
    if let Err(e) = pc.exploration.validate() {
        p.push(format!("exploration: {e}"));
    }
    if let DecisionSpace::Choice { k } = space {
        if k < 2 {
            p.push("choice spaces need k >= 2".into());
        }
    }
    p
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum LogEvent {
    Usecase { usecase: String, space: DecisionSpace },
    Created { blueprint: Box<StrategyBlueprint> },
    Status { usecase: String, version: u32, status: BlueprintStatus },
}

struct Stored {
    /// Canonical JSON as first stored; never rewritten.
    canonical: Arc<str>,
    blueprint: Arc<StrategyBlueprint>,
    status: BlueprintStatus,
}

struct UsecaseEntry {
    space: DecisionSpace,
    versions: Vec<Stored>,
    production: Option<u32>,
}

/// Where a unit was routed by [`BlueprintStore::resolve`].
#[derive(Debug, Clone)]
pub struct Resolution {
    pub blueprint: Arc<StrategyBlueprint>,
    pub assignment: Option<Assignment>,
}

/// Append-only blueprint registry. Content is immutable per version; the
/// lifecycle status is index metadata kept beside it.
pub struct BlueprintStore {
    usecases: RwLock<HashMap<String, UsecaseEntry>>,
    log: Option<Mutex<File>>,
    log_path: Option<PathBuf>,
}

impl Default for BlueprintStore {
    fn default() -> Self {
        Self::new()
    }
}

impl BlueprintStore {
    pub fn new() -> Self {
        Self { usecases: RwLock::new(HashMap::new()), log: None, log_path: None }
    }

    /// Opens (or creates) a store backed by an NDJSON event log, replaying
    /// existing events.
    pub fn open(path: &Path) -> Result<Self> {
        let mut store = Self::new();
        if path.exists() {
            let reader = BufReader::new(File::open(path)?);
            for line in reader.lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                store.apply(serde_json::from_str(&line)?)?;
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        store.log = Some(Mutex::new(file));
        store.log_path = Some(path.to_path_buf());
        Ok(store)
    }

    pub fn log_path(&self) -> Option<&Path> {
        self.log_path.as_deref()
    }

    fn append(&self, event: &LogEvent) -> Result<()> {
        if let Some(log) = &self.log {
            let mut line = serde_json::to_string(event)?;
            line.push('\n');
            let mut f = log.lock();
            f.write_all(line.as_bytes())?;
            f.flush()?;
        }
        Ok(())
    }

    fn apply(&mut self, event: LogEvent) -> Result<()> {
        let map = self.usecases.get_mut();
        match event {
            LogEvent::Usecase { usecase, space } => {
                map.insert(usecase, UsecaseEntry { space, versions: Vec::new(), production: None });
            }
            LogEvent::Created { blueprint } => {
                let entry = map
                    .get_mut(&blueprint.usecase_id)
                    .ok_or_else(|| Error::UnknownUsecase(blueprint.usecase_id.clone()))?;
                let canonical: Arc<str> = serde_json::to_string(&blueprint)?.into();
                let status = blueprint.status;
                entry.versions.push(Stored { canonical, blueprint: Arc::new(*blueprint), status });
            }
            LogEvent::Status { usecase, version, status } => {
                let entry = map.get_mut(&usecase).ok_or_else(|| Error::UnknownUsecase(usecase.clone()))?;
                set_status(entry, version, status);
            }
        }
        Ok(())
    }

    /// Declares a usecase and fixes its decision-space kind for all versions.
    pub fn register_usecase(&self, usecase: &str, space: DecisionSpace) -> Result<()> {
        let mut map = self.usecases.write();
        if map.contains_key(usecase) {
            return Err(Error::duplicate("usecase", usecase));
        }
        if usecase.is_empty() || usecase.contains('/') {
            return Err(Error::Validation(vec![format!("invalid usecase id `{usecase}`")]));
        }
        self.append(&LogEvent::Usecase { usecase: usecase.to_string(), space })?;
        map.insert(usecase.to_string(), UsecaseEntry { space, versions: Vec::new(), production: None });
        Ok(())
    }

    pub fn usecases(&self) -> Vec<String> {
        let mut v: Vec<String> = self.usecases.read().keys().cloned().collect();
        v.sort();
        v
    }

    pub fn decision_space(&self, usecase: &str) -> Result<DecisionSpace> {
        self.usecases
            .read()
            .get(usecase)
            .map(|e| e.space)
            .ok_or_else(|| Error::UnknownUsecase(usecase.to_string()))
    }

    /// Validates `draft` and stores it as the next version.
    pub fn create_version(
        &self,
        usecase: &str,
        draft: BlueprintDraft,
        has_group: &dyn Fn(&str) -> bool,
        now: Millis,
    ) -> Result<Arc<StrategyBlueprint>> {
        let mut map = self.usecases.write();
        let entry = map.get_mut(usecase).ok_or_else(|| Error::UnknownUsecase(usecase.to_string()))?;
        let problems = validate_draft(&draft, entry.space, has_group);
        if !problems.is_empty() {
            return Err(Error::Validation(problems));
        }
        let version = entry.versions.last().map_or(1, |s| s.blueprint.version + 1);
        let bp = StrategyBlueprint {
            usecase_id: usecase.to_string(),
            version,
            decision_space: entry.space,
            feature_config: draft.feature_config,
            label_config: draft.label_config,
            model_config: draft.model_config,
            policy_config: draft.policy_config,
            ttl_ms: draft.ttl_ms,
            created_at: now,
            status: BlueprintStatus::Draft,
        };
        self.append(&LogEvent::Created { blueprint: Box::new(bp.clone()) })?;
        let canonical: Arc<str> = serde_json::to_string(&bp)?.into();
        let bp = Arc::new(bp);
        entry.versions.push(Stored { canonical, blueprint: bp.clone(), status: BlueprintStatus::Draft });
        Ok(bp)
    }

    /// The blueprint with its current lifecycle status.
    pub fn get(&self, usecase: &str, version: u32) -> Result<StrategyBlueprint> {
        let map = self.usecases.read();
        let entry = map.get(usecase).ok_or_else(|| Error::UnknownUsecase(usecase.to_string()))?;
        let stored = lookup(entry, usecase, version)?;
        let mut bp = (*stored.blueprint).clone();
        bp.status = stored.status;
        Ok(bp)
    }

    pub(crate) fn get_arc(&self, usecase: &str, version: u32) -> Result<Arc<StrategyBlueprint>> {
        let map = self.usecases.read();
        let entry = map.get(usecase).ok_or_else(|| Error::UnknownUsecase(usecase.to_string()))?;
        Ok(lookup(entry, usecase, version)?.blueprint.clone())
    }

    /// Canonical JSON of the version exactly as first stored.
    pub fn canonical_json(&self, usecase: &str, version: u32) -> Result<Arc<str>> {
        let map = self.usecases.read();
        let entry = map.get(usecase).ok_or_else(|| Error::UnknownUsecase(usecase.to_string()))?;
        Ok(lookup(entry, usecase, version)?.canonical.clone())
    }

    pub fn list(&self, usecase: &str) -> Result<Vec<StrategyBlueprint>> {
        let map = self.usecases.read();
        let entry = map.get(usecase).ok_or_else(|| Error::UnknownUsecase(usecase.to_string()))?;
        Ok(entry
            .versions
            .iter()
            .map(|s| {
                let mut bp = (*s.blueprint).clone();
                bp.status = s.status;
                bp
            })
            .collect())
    }

    pub fn latest_version(&self, usecase: &str) -> Result<Option<u32>> {
        let map = self.usecases.read();
        let entry = map.get(usecase).ok_or_else(|| Error::UnknownUsecase(usecase.to_string()))?;
        Ok(entry.versions.last().map(|s| s.blueprint.version))
    }

    /// Makes `version` the single production version; the previous one is
    /// retired.
    pub fn activate(&self, usecase: &str, version: u32) -> Result<StrategyBlueprint> {
        let mut map = self.usecases.write();
        let entry = map.get_mut(usecase).ok_or_else(|| Error::UnknownUsecase(usecase.to_string()))?;
        lookup(entry, usecase, version)?;
        if let Some(prev) = entry.production.filter(|p| *p != version) {
            self.append(&LogEvent::Status {
                usecase: usecase.to_string(),
                version: prev,
                status: BlueprintStatus::Retired,
            })?;
            set_status(entry, prev, BlueprintStatus::Retired);
        }
        self.append(&LogEvent::Status {
            usecase: usecase.to_string(),
            version,
            status: BlueprintStatus::Live,
        })?;
        set_status(entry, version, BlueprintStatus::Live);
        drop(map);
        self.get(usecase, version)
    }

    pub fn production(&self, usecase: &str) -> Result<Option<Arc<StrategyBlueprint>>> {
        let map = self.usecases.read();
        let entry = map.get(usecase).ok_or_else(|| Error::UnknownUsecase(usecase.to_string()))?;
        Ok(entry
            .production
            .and_then(|v| lookup(entry, usecase, v).ok())
            .map(|s| s.blueprint.clone()))
    }

    /// Picks the blueprint serving `unit_id`: the experiment arm if an
    /// active experiment covers the usecase, else the production version.
    /// `covariates` is only consulted for experiments in HTE serving.
    pub fn resolve(
        &self,
        usecase: &str,
        unit_id: &str,
        experiments: &ExperimentStore,
        covariates: &dyn Fn(&StrategyBlueprint) -> Vec<f64>,
    ) -> Result<Resolution> {
        let production = self.production(usecase)?;
        if let Some(exp) = experiments.active_for(usecase) {
            let x = match (&production, exp.phase) {
                (Some(bp), crate::experiments::Phase::HteServing) => Some(covariates(bp)),
                _ => None,
            };
            let assignment = experiments.assign_unit(&exp, unit_id, x.as_deref())?;
            let blueprint = match assignment.target {
                crate::experiments::ArmTarget::Version(v) => self.get_arc(usecase, v)?,
                crate::experiments::ArmTarget::Treatment(_) => production
                    .clone()
                    .ok_or_else(|| Error::State(format!("usecase `{usecase}` has no live version")))?,
            };
            return Ok(Resolution { blueprint, assignment: Some(assignment) });
        }
        let blueprint =
            production.ok_or_else(|| Error::State(format!("usecase `{usecase}` has no live version")))?;
        Ok(Resolution { blueprint, assignment: None })
    }
}

fn lookup<'a>(entry: &'a UsecaseEntry, usecase: &str, version: u32) -> Result<&'a Stored> {
    version
        .checked_sub(1)
        .and_then(|i| entry.versions.get(i as usize))
        .ok_or_else(|| Error::not_found("blueprint version", format!("{usecase}/{version}")))
}

fn set_status(entry: &mut UsecaseEntry, version: u32, status: BlueprintStatus) {
    if let Some(s) = version.checked_sub(1).and_then(|i| entry.versions.get_mut(i as usize)) {
        s.status = status;
    }
    match status {
        BlueprintStatus::Live => entry.production = Some(version),
        _ if entry.production == Some(version) => entry.production = None,
        _ => {}
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::CONTEXT_GROUP;

    fn any_group(_: &str) -> bool {
        true
    }

    pub(crate) fn draft(features: &[&str], labels: &[LabelSpec]) -> BlueprintDraft {
        BlueprintDraft {
            feature_config: features.iter().map(|f| FeatureRef::new(CONTEXT_GROUP, f)).collect(),
            label_config: labels.to_vec(),
            model_config: ModelConfig::default(),
            policy_config: PolicyConfig::new(&format!("decide pred(\"{}\") >= 0.5;", labels[0].name)),
            ttl_ms: 60_000,
        }
    }

    fn bp(store: &BlueprintStore, usecase: &str, features: &[&str], labels: &[LabelSpec]) -> Arc<StrategyBlueprint> {
        store.create_version(usecase, draft(features, labels), &any_group, 0).unwrap()
    }

    fn store_with(usecase: &str) -> BlueprintStore {
        let s = BlueprintStore::new();
        s.register_usecase(usecase, DecisionSpace::Binary).unwrap();
        s
    }

    #[test]
    fn versions_are_sequential_and_immutable() {
        let s = store_with("prefetch");
        let click = LabelSpec::online_binary("click");
        let v1 = bp(&s, "prefetch", &["f1"], &[click.clone()]);
        assert_eq!(v1.version, 1);
        let v2 = bp(&s, "prefetch", &["f1", "f2"], &[click.clone()]);
        let v3 = bp(&s, "prefetch", &["f1"], &[click.clone()]);
        let mut edit = s.get("prefetch", 3).unwrap().to_draft();
        edit.policy_config.exploration = ExplorationConfig::epsilon_greedy(0.1);
        let v4 = s.create_version("prefetch", edit, &any_group, 5).unwrap();
        assert_eq!((v2.version, v3.version, v4.version), (2, 3, 4));
        assert_eq!(s.get("prefetch", 3).unwrap().policy_config.exploration, ExplorationConfig::none());
    }

    #[test]
    fn validation_lists_every_problem() {
        let s = store_with("u");
        let mut d = draft(&["f1", "f1"], &[LabelSpec::online_binary("click")]);
        d.policy_config = PolicyConfig::new(r#"decide pred("click") * param("w9") > 0.5;"#);
        d.model_config.max_depth = 0;
        let Err(Error::Validation(problems)) = s.create_version("u", d, &any_group, 0) else {
            panic!("expected validation error")
        };
        assert!(problems.iter().any(|p| p.contains("w9")), "{problems:?}");
        assert!(problems.iter().any(|p| p.contains("twice")), "{problems:?}");
        assert!(problems.iter().any(|p| p.contains("max_depth")), "{problems:?}");
    }

    #[test]
    fn unknown_usecase_and_group() {
        let s = store_with("u");
        let d = draft(&["f1"], &[LabelSpec::online_binary("click")]);
        assert!(matches!(s.create_version("nope", d.clone(), &any_group, 0), Err(Error::UnknownUsecase(_))));
        let mut d2 = d;
        d2.feature_config.push(FeatureRef::new("ghost", "g"));
        assert!(matches!(s.create_version("u", d2, &|g| g == CONTEXT_GROUP, 0), Err(Error::Validation(_))));
    }

    #[test]
    fn compatibility_subset_rule() {
        let s = store_with("u");
        let click = LabelSpec::online_binary("click");
        let rating = LabelSpec::real("rating", Aggregation::Last, DelayClass::Online);
        let a = bp(&s, "u", &["f1", "f2"], &[click.clone()]);
        let b = bp(&s, "u", &["f1", "f2", "f3"], &[click.clone(), rating.clone()]);
        assert!(check_compatibility(&a, &b).unwrap());
        assert!(!check_compatibility(&b, &a).unwrap());
        assert!(check_compatibility(&a, &a).unwrap());
        let c = bp(&s, "u", &["f1", "f2"], &[LabelSpec::online_binary("other")]);
        assert!(!check_compatibility(&a, &c).unwrap());

        let other = store_with("v");
        let x = bp(&other, "v", &["f1"], &[click]);
        assert!(matches!(check_compatibility(&a, &x), Err(Error::UsecaseMismatch(..))));
    }

    #[test]
    fn label_kind_must_match() {
        let s = store_with("u");
        let mut d = draft(&["f1"], &[LabelSpec::online_binary("click")]);
        d.model_config.task = TaskKind::Multitask;
        let a = s.create_version("u", d.clone(), &any_group, 0).unwrap();
        d.label_config = vec![LabelSpec::real("click", Aggregation::Sum, DelayClass::Online)];
        d.policy_config = PolicyConfig::new("decide pred(\"click\") > 1;");
        let b = s.create_version("u", d, &any_group, 0).unwrap();
        assert!(!check_compatibility(&a, &b).unwrap());
    }

    #[test]
    fn activation_keeps_single_production() {
        let s = store_with("u");
        let click = LabelSpec::online_binary("click");
        bp(&s, "u", &["f1"], &[click.clone()]);
        bp(&s, "u", &["f1"], &[click]);
        s.activate("u", 1).unwrap();
        s.activate("u", 2).unwrap();
        assert_eq!(s.get("u", 1).unwrap().status, BlueprintStatus::Retired);
        assert_eq!(s.get("u", 2).unwrap().status, BlueprintStatus::Live);
        assert_eq!(s.production("u").unwrap().unwrap().version, 2);
    }

    #[test]
    fn resolve_without_experiment() {
        let s = store_with("u");
        let exps = ExperimentStore::new();
        let none = |_: &StrategyBlueprint| Vec::new();
        assert!(s.resolve("u", "u1", &exps, &none).is_err());
        for _ in 0..5 {
            bp(&s, "u", &["f1"], &[LabelSpec::online_binary("click")]);
        }
        s.activate("u", 5).unwrap();
        let r = s.resolve("u", "u1", &exps, &none).unwrap();
        assert_eq!(r.blueprint.version, 5);
        assert!(r.assignment.is_none());
    }

    #[test]
    fn persisted_log_replays_identically() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("blueprints.ndjson");
        {
            let s = BlueprintStore::open(&path).unwrap();
            s.register_usecase("u", DecisionSpace::Binary).unwrap();
            bp(&s, "u", &["f1"], &[LabelSpec::online_binary("click")]);
            bp(&s, "u", &["f1", "f2"], &[LabelSpec::online_binary("click")]);
            s.activate("u", 2).unwrap();
        }
        let s = BlueprintStore::open(&path).unwrap();
        assert_eq!(s.production("u").unwrap().unwrap().version, 2);
        assert_eq!(s.list("u").unwrap().len(), 2);
        let again = BlueprintStore::open(&path).unwrap();
        assert_eq!(s.canonical_json("u", 1).unwrap(), again.canonical_json("u", 1).unwrap());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            /// Append-only history: stored bytes never change after later
            /// creates and activations.
            #[test]
            fn history_is_append_only(ops in proptest::collection::vec(0u8..3, 1..25)) {
                let s = store_with("u");
                let mut first_seen: Vec<Arc<str>> = Vec::new();
                for op in ops {
                    match op {
                        0 | 1 => {
                            let feats: Vec<String> = (0..=first_seen.len() % 3).map(|i| format!("f{i}")).collect();
                            let refs: Vec<&str> = feats.iter().map(String::as_str).collect();
                            let b = bp(&s, "u", &refs, &[LabelSpec::online_binary("click")]);
                            first_seen.push(s.canonical_json("u", b.version).unwrap());
                        }
                        _ => {
                            if !first_seen.is_empty() {
                                s.activate("u", first_seen.len() as u32).unwrap();
                            }
                        }
                    }
                    for (i, bytes) in first_seen.iter().enumerate() {
                        prop_assert_eq!(&s.canonical_json("u", i as u32 + 1).unwrap(), bytes);
                    }
                }
            }

            #[test]
            fn compatibility_reflexive_and_antisymmetric(
                fa in proptest::collection::btree_set(0u8..5, 1..5),
                fb in proptest::collection::btree_set(0u8..5, 1..5),
            ) {
                let s = store_with("u");
                let names = |set: &std::collections::BTreeSet<u8>| set.iter().map(|i| format!("f{i}")).collect::<Vec<_>>();
                let (na, nb) = (names(&fa), names(&fb));
                let a = bp(&s, "u", &na.iter().map(String::as_str).collect::<Vec<_>>(), &[LabelSpec::online_binary("click")]);
                let b = bp(&s, "u", &nb.iter().map(String::as_str).collect::<Vec<_>>(), &[LabelSpec::online_binary("click")]);
                prop_assert!(check_compatibility(&a, &a).unwrap());
                if check_compatibility(&a, &b).unwrap() && check_compatibility(&b, &a).unwrap() {
                    prop_assert_eq!(fa, fb);
                }
            }
        }
    }
}
