//! Dataset assembly from training rows, model fitting, holdout metrics and
//! the retrain trigger.

pub mod gbdt;
pub mod linear;
pub mod metrics;

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::blueprint::{check_compatibility, LabelKind, ModelConfig, ModelFamily, StrategyBlueprint};
use crate::clock::Millis;
use crate::error::{Error, Result};
use crate::features::slot_names;
use crate::hashing::{hash64, hash_parts, unit_interval};
use crate::joiner::{TrainingRow, POSITION_FEATURE};
use crate::space::DecisionSpace;

pub use gbdt::{GbdtModel, GbdtParams, Loss};
pub use linear::LinearModel;

pub const MODEL_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_MIN_ROWS: usize = 500;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskLabels {
    pub name: String,
    pub kind: LabelKind,
    /// `None` where the row has no value; such rows are dropped for this
    /// task only.
    pub values: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub slot_names: Vec<String>,
    /// Row-major model inputs, NaN where missing.
    pub x: Vec<Vec<f64>>,
    pub tasks: Vec<TaskLabels>,
    pub decision_ids: Vec<String>,
    pub versions: Vec<u32>,
    pub explored: Vec<bool>,
    pub holdout: Vec<bool>,
}

impl Dataset {
    /// Single-task dataset from a plain matrix; row `i` gets id `row-i`.
    pub fn from_xy(x: Vec<Vec<f64>>, y: &[f64], kind: LabelKind, holdout_fraction: f64) -> Self {
        let n = x.len();
        let slots = x.first().map_or(0, Vec::len);
        let decision_ids: Vec<String> = (0..n).map(|i| format!("row-{i}")).collect();
        let holdout = decision_ids.iter().map(|id| in_holdout(id, holdout_fraction)).collect();
        Self {
            slot_names: (0..slots).map(|i| format!("x{i}")).collect(),
            x,
            tasks: vec![TaskLabels { name: "y".into(), kind, values: y.iter().map(|v| Some(*v)).collect() }],
            decision_ids,
            versions: vec![0; n],
            explored: vec![false; n],
            holdout,
        }
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn holdout_count(&self) -> usize {
        self.holdout.iter().filter(|h| **h).count()
    }

    /// Rows of one task on one side of the split, skipping absent labels.
    pub fn task_split(&self, task: usize, holdout: bool) -> (Vec<Vec<f64>>, Vec<f64>) {
        let t = &self.tasks[task];
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..self.len() {
            if self.holdout[i] != holdout {
                continue;
            }
            if let Some(y) = t.values[i] {
                xs.push(self.x[i].clone());
                ys.push(y);
            }
        }
        (xs, ys)
    }
}

/// Deterministic train/holdout assignment.
pub fn in_holdout(decision_id: &str, fraction: f64) -> bool {
    unit_interval(hash_parts(&["holdout", decision_id])) < fraction
}

/// For each input slot of `consumer`, the producer slot carrying the same
/// encoded value; `None` unless the consumer's features are a subset of the
/// producer's.
pub fn slot_projection(consumer: &StrategyBlueprint, producer: &StrategyBlueprint) -> Option<Vec<usize>> {
    let mut offsets = Vec::with_capacity(producer.feature_config.len());
    let mut o = 0;
    for f in &producer.feature_config {
        offsets.push(o);
        o += f.width();
    }
    let mut map = Vec::with_capacity(consumer.model_slot_count());
    for f in &consumer.feature_config {
        let j = producer.feature_config.iter().position(|p| p == f)?;
        map.extend(offsets[j]..offsets[j] + f.width());
    }
    if consumer.decision_space == DecisionSpace::Ranking {
        if producer.decision_space != DecisionSpace::Ranking {
            return None;
        }
        map.push(o);
    }
    Some(map)
}

/// Input slot names for a blueprint, including the ranking position slot.
pub fn model_slot_names(bp: &StrategyBlueprint) -> Vec<String> {
    let mut names = slot_names(&bp.feature_config);
    if bp.decision_space == DecisionSpace::Ranking {
        names.push(POSITION_FEATURE.to_string());
    }
    names
}

/// Projects rows from compatible versions onto `target`'s layout. `lookup`
/// resolves the blueprint a row was produced under.
pub fn build_dataset(
    target: &StrategyBlueprint,
    rows: &[TrainingRow],
    lookup: &dyn Fn(u32) -> Option<Arc<StrategyBlueprint>>,
) -> Result<Dataset> {
    let task_labels = target.task_labels();
    let mut ds = Dataset {
        slot_names: model_slot_names(target),
        tasks: task_labels
            .iter()
            .map(|l| TaskLabels { name: l.name.clone(), kind: l.value_kind, values: Vec::new() })
            .collect(),
        ..Dataset::default()
    };
    let ranking = target.decision_space == DecisionSpace::Ranking;
    let mut projections: HashMap<u32, Option<Vec<usize>>> = HashMap::new();
    for row in rows {
        if row.usecase != target.usecase_id || (ranking && row.position.is_none()) {
            continue;
        }
        let proj = projections.entry(row.blueprint_version).or_insert_with(|| {
            let producer = lookup(row.blueprint_version)?;
            match check_compatibility(target, &producer) {
                Ok(true) => slot_projection(target, &producer),
                _ => None,
            }
        });
        let Some(proj) = proj else { continue };
        if proj.iter().any(|&j| j >= row.features.len()) {
            continue;
        }
        ds.x.push(
            proj.iter()
                .map(|&j| if row.missing_mask.get(j).copied().unwrap_or(true) { f64::NAN } else { row.features[j] })
                .collect(),
        );
        for t in &mut ds.tasks {
            t.values.push(row.labels.get(&t.name).copied());
        }
        ds.decision_ids.push(row.decision_id.clone());
        ds.versions.push(row.blueprint_version);
        ds.explored.push(row.explored);
        ds.holdout.push(in_holdout(&row.decision_id, target.model_config.holdout_fraction));
    }
    if ds.is_empty() {
        return Err(Error::InsufficientData(format!(
            "no rows compatible with {} v{}",
            target.usecase_id, target.version
        )));
    }
    Ok(ds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum HeadModel {
    Gbdt(GbdtModel),
    Linear(LinearModel),
}

impl HeadModel {
    pub fn fit(family: ModelFamily, cfg: &ModelConfig, x: &[Vec<f64>], y: &[f64], loss: Loss) -> Self {
        match family {
            ModelFamily::Gbdt => HeadModel::Gbdt(GbdtModel::fit(x, y, loss, &gbdt_params(cfg))),
            ModelFamily::Linear => HeadModel::Linear(LinearModel::fit(x, y, loss)),
        }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        match self {
            HeadModel::Gbdt(m) => m.predict(x),
            HeadModel::Linear(m) => m.predict(x),
        }
    }
}

pub fn gbdt_params(cfg: &ModelConfig) -> GbdtParams {
    GbdtParams {
        num_trees: cfg.num_trees,
        max_depth: cfg.max_depth,
        learning_rate: cfg.learning_rate,
        min_leaf: 1,
    }
}

pub fn loss_for(kind: LabelKind) -> Loss {
    match kind {
        LabelKind::Binary => Loss::Logistic,
        LabelKind::Real => Loss::Squared,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub label: String,
    pub kind: LabelKind,
    pub model: HeadModel,
}

/// A trained model. The JSON form is the artifact file format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub format_version: u32,
    pub model_id: String,
    pub usecase: String,
    pub blueprint_version: u32,
    pub family: ModelFamily,
    pub slot_names: Vec<String>,
    pub heads: Vec<Head>,
}

impl Model {
    pub fn n_slots(&self) -> usize {
        self.slot_names.len()
    }

    /// Binary heads yield probabilities, real heads raw values.
    pub fn predict(&self, x: &[f64]) -> Result<BTreeMap<String, f64>> {
        if x.len() != self.n_slots() {
            return Err(Error::invalid(format!(
                "model {} expects {} slots, got {}",
                self.model_id,
                self.n_slots(),
                x.len()
            )));
        }
        Ok(self.heads.iter().map(|h| (h.label.clone(), h.model.predict(x))).collect())
    }

    pub fn validate(&self) -> Result<()> {
        let mut p = Vec::new();
        if self.format_version != MODEL_FORMAT_VERSION {
            p.push(format!("unsupported format_version {}", self.format_version));
        }
        if self.model_id.is_empty() {
            p.push("empty model_id".into());
        }
        if self.heads.is_empty() {
            p.push("model has no heads".into());
        }
        for h in &self.heads {
            if let HeadModel::Gbdt(g) = &h.model {
                if g.n_features != self.n_slots() {
                    p.push(format!("head {} built for {} slots", h.label, g.n_features));
                }
                for t in &g.trees {
                    for n in &t.nodes {
                        if let gbdt::Node::Split { feature, left, right, .. } = n {
                            if *feature >= self.n_slots() || *left >= t.nodes.len() || *right >= t.nodes.len() {
                                p.push(format!("head {} has an out-of-range node", h.label));
                            }
                        }
                    }
                }
            }
            if let HeadModel::Linear(l) = &h.model {
                if l.weights.len() != self.n_slots() {
                    p.push(format!("head {} has {} weights", h.label, l.weights.len()));
                }
            }
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(p))
        }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: Model = serde_json::from_str(s)?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub holdout_rows: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub logloss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub model_id: String,
    pub usecase: String,
    pub blueprint_version: u32,
    pub metrics: BTreeMap<String, TaskMetrics>,
    pub rows_used: usize,
    pub train_rows: usize,
    pub holdout_rows: usize,
    pub duration_ms: u64,
    pub config: ModelConfig,
}

/// Fits one head per task label of `bp` and scores each on the holdout.
pub fn train(bp: &StrategyBlueprint, ds: &Dataset) -> Result<(Model, TrainReport)> {
    let start = Instant::now();
    let cfg = &bp.model_config;
    let mut heads = Vec::new();
    let mut metrics = BTreeMap::new();
    for (t, task) in ds.tasks.iter().enumerate() {
        let (x, y) = ds.task_split(t, false);
        if y.is_empty() {
            return Err(Error::InsufficientData(format!("no training rows carry label `{}`", task.name)));
        }
        let loss = loss_for(task.kind);
        let model = HeadModel::fit(cfg.family, cfg, &x, &y, loss);
        let (hx, hy) = ds.task_split(t, true);
        let p: Vec<f64> = hx.iter().map(|r| model.predict(r)).collect();
        let m = match (hy.is_empty(), task.kind) {
            (true, _) => TaskMetrics { holdout_rows: 0, logloss: None, auc: None, mse: None },
            (false, LabelKind::Binary) => TaskMetrics {
                holdout_rows: hy.len(),
                logloss: Some(metrics::logloss(&p, &hy)),
                auc: Some(metrics::auc(&p, &hy)),
                mse: None,
            },
            (false, LabelKind::Real) => {
                TaskMetrics { holdout_rows: hy.len(), logloss: None, auc: None, mse: Some(metrics::mse(&p, &hy)) }
            }
        };
        metrics.insert(task.name.clone(), m);
        heads.push(Head { label: task.name.clone(), kind: task.kind, model });
    }
    let digest = hash64(&serde_json::to_vec(&heads)?);
    let model_id = format!("{}-v{}-{:016x}", bp.usecase_id, bp.version, digest ^ ds.len() as u64);
    let model = Model {
        format_version: MODEL_FORMAT_VERSION,
        model_id: model_id.clone(),
        usecase: bp.usecase_id.clone(),
        blueprint_version: bp.version,
        family: cfg.family,
        slot_names: ds.slot_names.clone(),
        heads,
    };
    let holdout_rows = ds.holdout_count();
    let report = TrainReport {
        model_id,
        usecase: bp.usecase_id.clone(),
        blueprint_version: bp.version,
        metrics,
        rows_used: ds.len(),
        train_rows: ds.len() - holdout_rows,
        holdout_rows,
        duration_ms: start.elapsed().as_millis() as u64,
        config: cfg.clone(),
    };
    Ok((model, report))
}

/// Loss of `p` against `y` for a label kind: logloss or MSE.
pub fn task_loss(kind: LabelKind, p: &[f64], y: &[f64]) -> f64 {
    match kind {
        LabelKind::Binary => metrics::logloss(p, y),
        LabelKind::Real => metrics::mse(p, y),
    }
}

/// Primary metric (lower is better) of `model` over labelled inputs. With
/// several heads, each head's loss is divided by the loss of predicting the
/// label mean and the ratios are averaged. `None` if no row has a label.
pub fn primary_metric(model: &Model, x: &[Vec<f64>], labels: &[BTreeMap<String, f64>]) -> Option<f64> {
    let mut parts = Vec::new();
    for h in &model.heads {
        let mut p = Vec::new();
        let mut y = Vec::new();
        for (xi, li) in x.iter().zip(labels) {
            if let Some(v) = li.get(&h.label) {
                p.push(h.model.predict(xi));
                y.push(*v);
            }
        }
        if y.is_empty() {
            continue;
        }
        let l = task_loss(h.kind, &p, &y);
        if model.heads.len() == 1 {
            return Some(l);
        }
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        let base = task_loss(h.kind, &vec![mean; y.len()], &y);
        parts.push(if base > 1e-12 { l / base } else { l });
    }
    if parts.is_empty() {
        None
    } else {
        Some(parts.iter().sum::<f64>() / parts.len() as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrainPolicy {
    pub min_rows: usize,
    /// Retrain at least this often once a model exists.
    pub schedule_ms: Option<Millis>,
}

impl Default for RetrainPolicy {
    fn default() -> Self {
        Self { min_rows: DEFAULT_MIN_ROWS, schedule_ms: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LastTraining {
    pub rows_used: usize,
    pub trained_at: Millis,
}

/// Retrain once fresh rows reach 20% of the rows behind the last model, or
/// when the schedule has elapsed. Without a model, once `min_rows` exist.
pub fn should_retrain(policy: &RetrainPolicy, last: Option<&LastTraining>, fresh_rows: usize, now: Millis) -> bool {
    match last {
        None => fresh_rows >= policy.min_rows,
        Some(l) => {
            fresh_rows * 5 >= l.rows_used || policy.schedule_ms.is_some_and(|s| now - l.trained_at >= s)
        }
    }
}
