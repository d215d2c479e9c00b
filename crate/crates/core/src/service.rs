//! The decision API: `get_decision`, `log_observations`, `get_ranking` and
//! `log_display`, plus the training loop hooks (flush, retrain, canary
//! evaluation, drift) that sit behind it.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{sync_channel, Receiver, SyncSender, TrySendError};
use std::sync::{Arc, Weak};
use std::thread::JoinHandle;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use crate::blueprint::{BlueprintStore, LabelSpec, StrategyBlueprint};
use crate::clock::{Clock, Millis, SystemClock};
use crate::error::{Error, Result};
use crate::experiments::{Assignment, ExperimentStore};
use crate::features::{slot_names, AppContext, FeatureStore, FeatureVector};
use crate::hashing::hash64;
use crate::joiner::{append_ndjson, apply_updates, offline_join, read_ndjson, DecisionRecord, Joiner, TrainingRow, TrainingTable};
use crate::policy::{evaluate, explore, explore_ranking, parse_policy, DecisionOutput, EvalContext, PolicyProgram};
use crate::registry::{check_drift, DriftReport, PromotionOutcome, Registry, Window};
use crate::space::{DecisionSpace, DecisionValue};
use crate::trainer::{
    build_dataset, model_slot_names, should_retrain, slot_projection, train, LastTraining, Model, RetrainPolicy,
    TrainReport,
};

const SHARDS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StagingMode {
    /// Stage on the request thread; deterministic, used by the simulator.
    Inline,
    /// Stage on a worker thread behind a bounded queue; overflow is
    /// dropped and counted.
    Background,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlatformConfig {
    pub staging: StagingMode,
    pub queue_capacity: usize,
    pub retrain: RetrainPolicy,
    pub min_eval_rows: usize,
    pub shadow_fraction: f64,
    /// Persist blueprints, features, training rows, models and registry
    /// events here when set.
    pub data_dir: Option<PathBuf>,
}

impl Default for PlatformConfig {
    fn default() -> Self {
        Self {
            staging: StagingMode::Inline,
            queue_capacity: 65_536,
            retrain: RetrainPolicy::default(),
            min_eval_rows: crate::registry::DEFAULT_MIN_EVAL_ROWS,
            shadow_fraction: 1.0,
            data_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRequest {
    pub usecase_id: String,
    pub decision_id: String,
    #[serde(default)]
    pub application_context: AppContext,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionResponse {
    pub decision: Option<DecisionValue>,
    pub blueprint_version: u32,
    pub model_id: Option<String>,
    pub explored: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationBatch {
    pub decision_id: String,
    pub observations: BTreeMap<String, f64>,
    /// Defaults to the platform clock.
    #[serde(default)]
    pub observed_at: Option<Millis>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingRequest {
    pub usecase_id: String,
    pub decision_id: String,
    #[serde(default)]
    pub viewer_context: AppContext,
    pub candidates: Vec<AppContext>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedItem {
    pub index: usize,
    pub score: Option<f64>,
    pub item_token: String,
    pub explored: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingResponse {
    pub items: Vec<RankedItem>,
    pub blueprint_version: u32,
    pub model_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisplayRequest {
    pub decision_id: String,
    /// `(item_token, screen position)` for every shown item; items left out
    /// are recorded as not shown.
    pub positions: Vec<(String, i64)>,
}

/// One pass of the training loop for a usecase: flush expired decisions,
/// shadow-evaluate canaries, retrain when due, and optionally check drift.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaintenanceRequest {
    /// Defaults to the platform clock.
    pub now: Option<Millis>,
    /// Train and publish a canary when the retrain trigger fires.
    pub retrain: bool,
    /// Train even if the trigger has not fired.
    pub force_retrain: bool,
    pub drift_baseline: Option<(Millis, Millis)>,
    pub drift_current: Option<(Millis, Millis)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanaryOutcome {
    pub model_id: String,
    pub outcome: Option<PromotionOutcome>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaintenanceReport {
    pub flushed: usize,
    pub canaries: Vec<CanaryOutcome>,
    pub trained: Option<TrainReport>,
    pub published: Option<String>,
    pub production_model: Option<String>,
    pub drift: Option<DriftReport>,
}

#[derive(Debug, Default)]
struct Counters {
    decisions: AtomicU64,
    null_decisions: AtomicU64,
    policy_errors: AtomicU64,
    model_errors: AtomicU64,
    staging_dropped: AtomicU64,
    staging_errors: AtomicU64,
    observations: AtomicU64,
    rows_emitted: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stats {
    pub decisions: u64,
    pub null_decisions: u64,
    pub policy_errors: u64,
    pub model_errors: u64,
    pub staging_dropped: u64,
    pub staging_errors: u64,
    pub observations: u64,
    pub rows_emitted: u64,
}

/// What the platform remembers about an issued decision id.
#[derive(Debug, Clone)]
struct Issued {
    labels: Arc<Vec<LabelSpec>>,
    exposure: Option<(String, String)>,
    /// Item count for ranking decisions.
    items: Option<usize>,
}

enum StageMsg {
    Stage(Box<DecisionRecord>),
    Observe { decision_id: String, observations: BTreeMap<String, f64>, at: Millis },
    Display { token: String, position: Option<i64> },
    Barrier(SyncSender<()>),
}

#[derive(Debug, Clone, Default)]
struct TrainingState {
    last: Option<LastTraining>,
    /// Rows in the table when the last model was trained.
    rows_at_last: usize,
}

/// Compiled policy per blueprint, parsed once.
struct Compiled {
    program: Arc<PolicyProgram>,
    slots: Arc<Vec<String>>,
    labels: Arc<Vec<LabelSpec>>,
}

pub struct Platform {
    pub blueprints: BlueprintStore,
    pub features: FeatureStore,
    pub joiner: Joiner,
    pub registry: Registry,
    pub experiments: ExperimentStore,
    clock: Arc<dyn Clock>,
    config: PlatformConfig,
    table: Option<TrainingTable>,
    rows: Mutex<HashMap<String, Vec<TrainingRow>>>,
    issued: Vec<Mutex<HashMap<String, Issued>>>,
    compiled: RwLock<HashMap<(String, u32), Arc<Compiled>>>,
    training: Mutex<HashMap<String, TrainingState>>,
    counters: Counters,
    stage_tx: Mutex<Option<SyncSender<StageMsg>>>,
    worker: Mutex<Option<JoinHandle<()>>>,
}

impl Platform {
    pub fn new(config: PlatformConfig) -> Result<Arc<Self>> {
        Self::with_clock(config, Arc::new(SystemClock))
    }

    pub fn with_clock(config: PlatformConfig, clock: Arc<dyn Clock>) -> Result<Arc<Self>> {
        let (blueprints, features, table, registry) = match &config.data_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                let snapshot = dir.join("features.json");
                let features =
                    if snapshot.exists() { FeatureStore::load_snapshot(&snapshot)? } else { FeatureStore::new() };
                let models = dir.join("models");
                let load = |usecase: &str, id: &str| Model::load(&models.join(usecase).join(format!("{id}.json")));
                (
                    BlueprintStore::open(&dir.join("blueprints.ndjson"))?,
                    features,
                    Some(TrainingTable::open(dir.join("training"))?),
                    Registry::open(&dir.join("registry.ndjson"), &load)?,
                )
            }
            None => (BlueprintStore::new(), FeatureStore::new(), None, Registry::new()),
        };
        let registry = registry.with_min_eval_rows(config.min_eval_rows);
        let background = config.staging == StagingMode::Background;
        let capacity = config.queue_capacity.max(1);
        let platform = Arc::new(Self {
            blueprints,
            features,
            joiner: Joiner::new(),
            registry,
            experiments: ExperimentStore::new(),
            clock,
            config,
            table,
            rows: Mutex::new(HashMap::new()),
            issued: (0..SHARDS).map(|_| Mutex::new(HashMap::new())).collect(),
            compiled: RwLock::new(HashMap::new()),
            training: Mutex::new(HashMap::new()),
            counters: Counters::default(),
            stage_tx: Mutex::new(None),
            worker: Mutex::new(None),
        });
        if let Some(table) = &platform.table {
            let mut rows = platform.rows.lock();
            for usecase in platform.blueprints.usecases() {
                rows.insert(usecase.clone(), table.read_usecase(&usecase)?);
            }
        }
        if background {
            let (tx, rx) = sync_channel(capacity);
            let weak = Arc::downgrade(&platform);
            let handle = std::thread::Builder::new()
                .name("loopkit-staging".into())
                .spawn(move || staging_worker(weak, rx))?;
            *platform.stage_tx.lock() = Some(tx);
            *platform.worker.lock() = Some(handle);
        }
        Ok(platform)
    }

    pub fn config(&self) -> &PlatformConfig {
        &self.config
    }

    pub fn now(&self) -> Millis {
        self.clock.now()
    }

    pub fn stats(&self) -> Stats {
        let c = &self.counters;
        let g = |a: &AtomicU64| a.load(Ordering::Relaxed);
        Stats {
            decisions: g(&c.decisions),
            null_decisions: g(&c.null_decisions),
            policy_errors: g(&c.policy_errors),
            model_errors: g(&c.model_errors),
            staging_dropped: g(&c.staging_dropped),
            staging_errors: g(&c.staging_errors),
            observations: g(&c.observations),
            rows_emitted: g(&c.rows_emitted),
        }
    }

    /// Persists the feature store snapshot to the data dir, if any.
    pub fn save_features(&self) -> Result<()> {
        if let Some(dir) = &self.config.data_dir {
            self.features.save_snapshot(&dir.join("features.json"))?;
        }
        Ok(())
    }

    fn issued_shard(&self, id: &str) -> &Mutex<HashMap<String, Issued>> {
        &self.issued[(hash64(id.as_bytes()) % SHARDS as u64) as usize]
    }

    fn reserve(&self, id: &str, entry: Issued) -> Result<()> {
        if id.is_empty() {
            return Err(Error::invalid("decision_id is empty"));
        }
        let mut shard = self.issued_shard(id).lock();
        if shard.contains_key(id) || self.joiner.is_known(id) {
            return Err(Error::duplicate("decision", id));
        }
        shard.insert(id.to_string(), entry);
        Ok(())
    }

    fn compiled(&self, bp: &StrategyBlueprint) -> Result<Arc<Compiled>> {
        let key = (bp.usecase_id.clone(), bp.version);
        if let Some(c) = self.compiled.read().get(&key) {
            return Ok(c.clone());
        }
        let c = Arc::new(Compiled {
            program: Arc::new(parse_policy(&bp.policy_config.dsl_source)?),
            slots: Arc::new(slot_names(&bp.feature_config)),
            labels: Arc::new(bp.label_config.clone()),
        });
        self.compiled.write().insert(key, c.clone());
        Ok(c)
    }

    /// Production model input for a vector assembled under `bp`, or `None`
    /// (counted) when the model cannot consume it.
    fn model_input(&self, model: &Model, bp: &StrategyBlueprint, input: &[f64]) -> Option<Vec<f64>> {
        if model.blueprint_version == bp.version {
            return Some(input.to_vec());
        }
        let model_bp = self.blueprints.get(&bp.usecase_id, model.blueprint_version).ok()?;
        let proj = slot_projection(&model_bp, bp);
        if proj.is_none() {
            self.counters.model_errors.fetch_add(1, Ordering::Relaxed);
        }
        Some(proj?.into_iter().map(|j| input[j]).collect())
    }

    fn predict(&self, model: &Model, bp: &StrategyBlueprint, input: &[f64]) -> Option<BTreeMap<String, f64>> {
        let x = self.model_input(model, bp, input)?;
        match model.predict(&x) {
            Ok(p) => Some(p),
            Err(e) => {
                log::warn!("prediction failed: {e}");
                self.counters.model_errors.fetch_add(1, Ordering::Relaxed);
                None
            }
        }
    }

    fn eval_context(bp: &StrategyBlueprint, slots: &[String], fv: &FeatureVector, predictions: &BTreeMap<String, f64>) -> EvalContext {
        let features = slots
            .iter()
            .zip(fv.values.iter().zip(&fv.missing_mask))
            .filter(|(_, (_, m))| !**m)
            .map(|(n, (v, _))| (n.clone(), *v))
            .collect();
        EvalContext { predictions: predictions.clone(), features, parameters: bp.policy_config.parameters.clone() }
    }

    /// Unit used for experiment assignment: the context's `unit_id` when
    /// present, else the decision id.
    fn unit_id(req_ctx: &AppContext, decision_id: &str) -> String {
        match req_ctx.get("unit_id") {
            Some(serde_json::Value::String(s)) => s.clone(),
            Some(v @ serde_json::Value::Number(_)) => v.to_string(),
            _ => decision_id.to_string(),
        }
    }

    fn resolve(&self, usecase: &str, unit: &str, ctx: &AppContext) -> Result<(Arc<StrategyBlueprint>, Option<Assignment>, Vec<f64>)> {
        let covariates = match (self.experiments.active_for(usecase), self.blueprints.production(usecase)?) {
            (Some(_), Some(prod)) => self.features.assemble_vector(&prod.feature_config, ctx).model_input(),
            _ => Vec::new(),
        };
        let r = self.blueprints.resolve(usecase, unit, &self.experiments, &|_| covariates.clone())?;
        Ok((r.blueprint, r.assignment, covariates))
    }

    pub fn get_decision(&self, req: &DecisionRequest) -> Result<DecisionResponse> {
        let now = self.now();
        let space = self.blueprints.decision_space(&req.usecase_id)?;
        if space == DecisionSpace::Ranking {
            return Err(Error::WrongDecisionSpace { expected: "a single-decision space".into(), actual: space.to_string() });
        }
        let unit = Self::unit_id(&req.application_context, &req.decision_id);
        let (bp, assignment, covariates) = self.resolve(&req.usecase_id, &unit, &req.application_context)?;
        let compiled = self.compiled(&bp)?;
        let exposure = assignment.as_ref().map(|a| (a.experiment_id.clone(), unit.clone()));
        self.reserve(&req.decision_id, Issued { labels: compiled.labels.clone(), exposure, items: None })?;
        if let Some(a) = &assignment {
            self.experiments.record_exposure(a, &unit, covariates)?;
        }
        self.counters.decisions.fetch_add(1, Ordering::Relaxed);

        let fv = self.features.assemble_vector(&bp.feature_config, &req.application_context);
        let input = fv.model_input();
        let model = self.registry.production(&req.usecase_id);
        let predictions = model.as_ref().and_then(|m| self.predict(m, &bp, &input));
        let mut decision = None;
        let mut explored = false;
        if let Some(preds) = &predictions {
            let ctx = Self::eval_context(&bp, &compiled.slots, &fv, preds);
            match evaluate(&compiled.program, &ctx).map_err(Error::from).and_then(|o| to_value(o, space)) {
                Ok(base) => {
                    let (v, e) = explore(base, space, &bp.policy_config.exploration, hash64(req.decision_id.as_bytes()))?;
                    decision = Some(v);
                    explored = e;
                }
                Err(e) => {
                    log::debug!("policy failed for {}: {e}", req.decision_id);
                    self.counters.policy_errors.fetch_add(1, Ordering::Relaxed);
                }
            }
        }
        if decision.is_none() {
            self.counters.null_decisions.fetch_add(1, Ordering::Relaxed);
        }
        let model_id = if predictions.is_some() { model.map(|m| m.model_id.clone()) } else { None };
        self.stage(DecisionRecord {
            decision_id: req.decision_id.clone(),
            usecase: req.usecase_id.clone(),
            blueprint_version: bp.version,
            features: fv,
            predictions: predictions.unwrap_or_default(),
            staged_at: now,
            ttl: bp.ttl_ms,
            labels: compiled.labels.clone(),
            explored,
            position: None,
        });
        Ok(DecisionResponse { decision, blueprint_version: bp.version, model_id, explored })
    }

    pub fn get_ranking(&self, req: &RankingRequest) -> Result<RankingResponse> {
        let now = self.now();
        let space = self.blueprints.decision_space(&req.usecase_id)?;
        if space != DecisionSpace::Ranking {
            return Err(Error::WrongDecisionSpace { expected: DecisionSpace::Ranking.to_string(), actual: space.to_string() });
        }
        if req.candidates.is_empty() {
            return Err(Error::invalid("candidates is empty"));
        }
        let unit = Self::unit_id(&req.viewer_context, &req.decision_id);
        let (bp, assignment, covariates) = self.resolve(&req.usecase_id, &unit, &req.viewer_context)?;
        let compiled = self.compiled(&bp)?;
        let n = req.candidates.len();
        let tokens: Vec<String> = (0..n).map(|i| format!("{}:{i}", req.decision_id)).collect();
        if tokens.iter().any(|t| self.issued_shard(t).lock().contains_key(t)) {
            return Err(Error::duplicate("decision", &req.decision_id));
        }
        let exposure = assignment.as_ref().map(|a| (a.experiment_id.clone(), unit.clone()));
        self.reserve(&req.decision_id, Issued { labels: compiled.labels.clone(), exposure: exposure.clone(), items: Some(n) })?;
        for t in &tokens {
            self.reserve(t, Issued { labels: compiled.labels.clone(), exposure: exposure.clone(), items: None })?;
        }
        if let Some(a) = &assignment {
            self.experiments.record_exposure(a, &unit, covariates)?;
        }
        self.counters.decisions.fetch_add(1, Ordering::Relaxed);

        let model = self.registry.production(&req.usecase_id);
        let mut vectors = Vec::with_capacity(n);
        let mut scores: Vec<Option<f64>> = Vec::with_capacity(n);
        let mut all_predictions = Vec::with_capacity(n);
        for cand in &req.candidates {
            let mut ctx = req.viewer_context.clone();
            ctx.extend(cand.iter().map(|(k, v)| (k.clone(), v.clone())));
            let mut fv = self.features.assemble_vector(&bp.feature_config, &ctx);
            let mut input = fv.model_input();
            // scored as if shown first
            input.push(0.0);
            let preds = model.as_ref().and_then(|m| self.predict(m, &bp, &input));
            let score = preds.as_ref().and_then(|p| {
                let ctx = Self::eval_context(&bp, &compiled.slots, &fv, p);
                match evaluate(&compiled.program, &ctx) {
                    Ok(o) => Some(o.as_f64()),
                    Err(e) => {
                        log::debug!("policy failed for {}: {e}", req.decision_id);
                        self.counters.policy_errors.fetch_add(1, Ordering::Relaxed);
                        None
                    }
                }
            });
            fv.values.push(f64::NAN);
            fv.missing_mask.push(true);
            vectors.push(fv);
            scores.push(score);
            all_predictions.push(preds);
        }
        let mut order: Vec<usize> = (0..n).collect();
        let scored = scores.iter().all(Option::is_some);
        if scored {
            order.sort_by(|a, b| scores[*b].unwrap().total_cmp(&scores[*a].unwrap()).then(a.cmp(b)));
        } else {
            self.counters.null_decisions.fetch_add(1, Ordering::Relaxed);
        }
        let placed = if scored {
            explore_ranking(&order, &bp.policy_config.exploration, hash64(req.decision_id.as_bytes()))?
        } else {
            order.iter().map(|i| (*i, false)).collect()
        };
        let model_id = if scored { model.map(|m| m.model_id.clone()) } else { None };
        let mut items = Vec::with_capacity(n);
        for (idx, explored) in &placed {
            items.push(RankedItem {
                index: *idx,
                score: if scored { scores[*idx] } else { None },
                item_token: tokens[*idx].clone(),
                explored: *explored,
            });
        }
        let explored_by_idx: HashMap<usize, bool> = placed.into_iter().collect();
        for (idx, (fv, preds)) in vectors.into_iter().zip(all_predictions).enumerate() {
            self.stage(DecisionRecord {
                decision_id: tokens[idx].clone(),
                usecase: req.usecase_id.clone(),
                blueprint_version: bp.version,
                features: fv,
                predictions: if scored { preds.unwrap_or_default() } else { BTreeMap::new() },
                staged_at: now,
                ttl: bp.ttl_ms,
                labels: compiled.labels.clone(),
                explored: explored_by_idx[&idx],
                position: None,
            });
        }
        Ok(RankingResponse { items, blueprint_version: bp.version, model_id })
    }

    pub fn log_display(&self, req: &DisplayRequest) -> Result<()> {
        let items = self
            .issued_shard(&req.decision_id)
            .lock()
            .get(&req.decision_id)
            .and_then(|i| i.items)
            .ok_or_else(|| Error::not_found("ranking decision", &req.decision_id))?;
        let mut positions: Vec<Option<i64>> = vec![None; items];
        let mut problems = Vec::new();
        for (token, pos) in &req.positions {
            let idx = token
                .strip_prefix(&req.decision_id)
                .and_then(|s| s.strip_prefix(':'))
                .and_then(|s| s.parse::<usize>().ok())
                .filter(|i| *i < items);
            match idx {
                Some(i) if *pos >= 0 => positions[i] = Some(*pos),
                Some(_) => problems.push(format!("negative position for `{token}`")),
                None => problems.push(format!("unknown item token `{token}`")),
            }
        }
        if !problems.is_empty() {
            return Err(Error::Validation(problems));
        }
        for (i, position) in positions.into_iter().enumerate() {
            self.send(StageMsg::Display { token: format!("{}:{i}", req.decision_id), position });
        }
        Ok(())
    }

    /// Validates label names and kinds for known decisions, then forwards
    /// to the joiner. Unknown ids are accepted and logged as delayed.
    pub fn log_observations(&self, batch: &ObservationBatch) -> Result<()> {
        if let Some(issued) = self.issued_shard(&batch.decision_id).lock().get(&batch.decision_id) {
            let mut problems = Vec::new();
            for (name, v) in &batch.observations {
                match issued.labels.iter().find(|l| &l.name == name) {
                    None => problems.push(format!("`{name}` is not a label of this decision")),
                    Some(spec) if !spec.accepts(*v) => {
                        problems.push(format!("`{name}` is {:?} and cannot take {v}", spec.value_kind))
                    }
                    Some(_) => {}
                }
            }
            if !problems.is_empty() {
                return Err(Error::KindMismatch(problems));
            }
        }
        self.counters.observations.fetch_add(1, Ordering::Relaxed);
        self.send(StageMsg::Observe {
            decision_id: batch.decision_id.clone(),
            observations: batch.observations.clone(),
            at: batch.observed_at.unwrap_or_else(|| self.now()),
        });
        Ok(())
    }

    fn stage(&self, record: DecisionRecord) {
        self.send(StageMsg::Stage(Box::new(record)));
    }

    fn send(&self, msg: StageMsg) {
        let tx = self.stage_tx.lock().clone();
        match tx {
            None => self.apply(msg),
            Some(tx) => match tx.try_send(msg) {
                Ok(()) => {}
                Err(TrySendError::Full(StageMsg::Barrier(b))) => {
                    // barriers must get through
                    let _ = tx.send(StageMsg::Barrier(b));
                }
                Err(_) => {
                    self.counters.staging_dropped.fetch_add(1, Ordering::Relaxed);
                }
            },
        }
    }

    /// Blocks until everything queued for staging so far has been applied.
    pub fn sync_staging(&self) {
        let (tx, rx) = sync_channel(1);
        self.send(StageMsg::Barrier(tx));
        let _ = rx.recv();
    }

    fn apply(&self, msg: StageMsg) {
        match msg {
            StageMsg::Stage(record) => {
                if let Err(e) = self.joiner.stage_decision(*record) {
                    log::warn!("staging failed: {e}");
                    self.counters.staging_errors.fetch_add(1, Ordering::Relaxed);
                }
            }
            StageMsg::Observe { decision_id, observations, at } => {
                let out = self.joiner.ingest_observation(&decision_id, &observations, at);
                if let Some(row) = out.finalized {
                    self.accept_rows(vec![row]);
                }
            }
            StageMsg::Display { token, position } => {
                if let Err(e) = self.joiner.set_position(&token, position) {
                    log::debug!("display for {token} not applied: {e}");
                    self.counters.staging_errors.fetch_add(1, Ordering::Relaxed);
                }
            }
            StageMsg::Barrier(tx) => {
                let _ = tx.send(());
            }
        }
    }

    fn accept_rows(&self, rows: Vec<TrainingRow>) {
        if rows.is_empty() {
            return;
        }
        self.counters.rows_emitted.fetch_add(rows.len() as u64, Ordering::Relaxed);
        for row in &rows {
            let exposure = self.issued_shard(&row.decision_id).lock().get(&row.decision_id).and_then(|i| i.exposure.clone());
            if let Some((exp, unit)) = exposure {
                if let Err(e) = self.experiments.record_outcome(&exp, &unit, &row.labels) {
                    log::debug!("outcome for {} not recorded: {e}", row.decision_id);
                }
            }
        }
        if let Some(t) = &self.table {
            if let Err(e) = t.append(&rows) {
                log::error!("training table append failed: {e}");
            }
        }
        let mut table = self.rows.lock();
        for row in rows {
            table.entry(row.usecase.clone()).or_default().push(row);
        }
    }

    /// Finalizes expired pending decisions into training rows.
    pub fn flush(&self, now: Millis) -> usize {
        self.sync_staging();
        let rows = self.joiner.flush_expired(now);
        let n = rows.len();
        self.accept_rows(rows);
        if let Err(e) = self.persist_joiner_logs() {
            log::error!("persisting joiner logs failed: {e}");
        }
        n
    }

    /// Moves the joiner's archive and delayed log to the data dir.
    fn persist_joiner_logs(&self) -> Result<()> {
        let Some(dir) = &self.config.data_dir else { return Ok(()) };
        let (archive, delayed) = self.joiner.take_logs();
        append_ndjson(&dir.join("joiner").join("archive.ndjson"), &archive)?;
        append_ndjson(&dir.join("joiner").join("delayed.ndjson"), &delayed)?;
        Ok(())
    }

    /// Applies delayed observations in `[since, until)` to stored rows.
    pub fn offline_join(&self, since: Millis, until: Millis) -> Result<usize> {
        self.sync_staging();
        let (archive, delayed) = match &self.config.data_dir {
            Some(dir) => {
                self.persist_joiner_logs()?;
                (
                    read_ndjson(&dir.join("joiner").join("archive.ndjson"))?,
                    read_ndjson(&dir.join("joiner").join("delayed.ndjson"))?,
                )
            }
            None => (self.joiner.archive(), self.joiner.delayed_log()),
        };
        let updates = offline_join(&archive, &delayed, since, until)?;
        let mut table = self.rows.lock();
        let mut n = 0;
        for (usecase, rows) in table.iter_mut() {
            let changed = apply_updates(rows, &updates);
            if changed > 0 {
                if let Some(t) = &self.table {
                    t.rewrite_usecase(usecase, rows)?;
                }
            }
            n += changed;
        }
        Ok(n)
    }

    /// Training rows of a usecase, in arrival order.
    pub fn training_rows(&self, usecase: &str) -> Vec<TrainingRow> {
        self.rows.lock().get(usecase).cloned().unwrap_or_default()
    }

    pub fn training_row_count(&self, usecase: &str) -> usize {
        self.rows.lock().get(usecase).map_or(0, Vec::len)
    }

    pub fn should_retrain(&self, usecase: &str, now: Millis) -> bool {
        let total = self.training_row_count(usecase);
        let st = self.training.lock().get(usecase).cloned().unwrap_or_default();
        should_retrain(&self.config.retrain, st.last.as_ref(), total - st.rows_at_last, now)
    }

    /// Trains against `version` (default: the production blueprint) on all
    /// compatible rows.
    pub fn train(&self, usecase: &str, version: Option<u32>) -> Result<(Model, TrainReport)> {
        let target = match version {
            Some(v) => self.blueprints.get(usecase, v)?,
            None => (*self
                .blueprints
                .production(usecase)?
                .ok_or_else(|| Error::State(format!("usecase `{usecase}` has no live version")))?)
            .clone(),
        };
        let rows = self.training_rows(usecase);
        let lookup = |v: u32| self.blueprints.get(usecase, v).ok().map(Arc::new);
        let ds = build_dataset(&target, &rows, &lookup)?;
        let (model, report) = train(&target, &ds)?;
        self.training.lock().insert(
            usecase.to_string(),
            TrainingState {
                last: Some(LastTraining { rows_used: report.rows_used, trained_at: self.now() }),
                rows_at_last: rows.len(),
            },
        );
        Ok((model, report))
    }

    /// Publishes a model as canary, writing its artifact when persistent.
    pub fn publish(&self, model: Model, report: &TrainReport) -> Result<String> {
        if let Some(dir) = &self.config.data_dir {
            model.save(&dir.join("models").join(&model.usecase).join(format!("{}.json", model.model_id)))?;
        }
        self.registry.publish(model, report.metrics.clone(), self.now())
    }

    /// Maps a training row onto a model's inputs.
    pub fn project_row(&self, model: &Model, row: &TrainingRow) -> Option<Vec<f64>> {
        let model_bp = self.blueprints.get(&model.usecase, model.blueprint_version).ok()?;
        let row_bp = self.blueprints.get(&row.usecase, row.blueprint_version).ok()?;
        let proj = slot_projection(&model_bp, &row_bp)?;
        let fv = row.feature_vector().model_input();
        proj.iter().map(|&j| fv.get(j).copied()).collect()
    }

    /// Shadow-evaluates every canary on rows with `ts` in `[since, until)`
    /// and promotes those that beat production.
    pub fn evaluate_canaries(&self, usecase: &str, since: Millis, until: Millis) -> Vec<(String, Result<PromotionOutcome>)> {
        let rows: Vec<TrainingRow> =
            self.training_rows(usecase).into_iter().filter(|r| r.ts >= since && r.ts < until).collect();
        let project = |m: &Model, r: &TrainingRow| self.project_row(m, r);
        self.registry
            .snapshot()
            .canaries(usecase)
            .iter()
            .map(|c| {
                let outcome = self
                    .registry
                    .shadow_evaluate(&c.model_id, &rows, self.config.shadow_fraction, &project)
                    .and_then(|_| self.registry.promote_if_better(&c.model_id, self.now()));
                (c.model_id.clone(), outcome)
            })
            .collect()
    }

    fn window(&self, usecase: &str, bp: &StrategyBlueprint, (start, end): (Millis, Millis)) -> Window {
        let mut w = Window { start, end, ..Window::default() };
        let mut projections: HashMap<u32, Option<Vec<usize>>> = HashMap::new();
        for r in self.training_rows(usecase).iter().filter(|r| r.ts >= start && r.ts < end) {
            let proj = projections.entry(r.blueprint_version).or_insert_with(|| {
                let producer = self.blueprints.get(usecase, r.blueprint_version).ok()?;
                slot_projection(bp, &producer)
            });
            let Some(proj) = proj else { continue };
            let fv = r.feature_vector().model_input();
            w.features.push(proj.iter().map(|&j| fv.get(j).copied().unwrap_or(f64::NAN)).collect());
            w.predictions.push(r.predictions.clone());
        }
        w
    }

    /// PSI of the production blueprint's features between two row windows.
    pub fn check_drift(&self, usecase: &str, baseline: (Millis, Millis), current: (Millis, Millis)) -> Result<DriftReport> {
        let bp = self
            .blueprints
            .production(usecase)?
            .ok_or_else(|| Error::State(format!("usecase `{usecase}` has no live version")))?;
        let slots = model_slot_names(&bp);
        check_drift(&slots, &self.window(usecase, &bp, baseline), &self.window(usecase, &bp, current))
    }

    /// Shadow-evaluates one canary on rows with `ts` in `[since, until)`
    /// (defaults: its publication time and now), then promotes it if it
    /// beats production.
    pub fn evaluate_and_promote(&self, model_id: &str, since: Option<Millis>, until: Option<Millis>) -> Result<PromotionOutcome> {
        let snap = self.registry.snapshot();
        let artifact = snap.artifact(model_id).ok_or_else(|| Error::not_found("model", model_id))?;
        let since = since.unwrap_or(artifact.published_at);
        let until = until.unwrap_or_else(|| self.now() + 1);
        let rows: Vec<TrainingRow> =
            self.training_rows(&artifact.usecase).into_iter().filter(|r| r.ts >= since && r.ts < until).collect();
        let project = |m: &Model, r: &TrainingRow| self.project_row(m, r);
        self.registry.shadow_evaluate(model_id, &rows, self.config.shadow_fraction, &project)?;
        self.registry.promote_if_better(model_id, self.now())
    }

    /// Runs one maintenance pass. Each canary is shadow-evaluated on the
    /// rows that arrived since it was published.
    pub fn maintain(&self, usecase: &str, req: &MaintenanceRequest) -> Result<MaintenanceReport> {
        self.blueprints.decision_space(usecase)?;
        let now = req.now.unwrap_or_else(|| self.now());
        let flushed = self.flush(now);
        let mut canaries = Vec::new();
        for c in self.registry.snapshot().canaries(usecase) {
            canaries.push(match self.evaluate_and_promote(&c.model_id, None, Some(now)) {
                Ok(o) => CanaryOutcome { model_id: c.model_id.clone(), outcome: Some(o), error: None },
                Err(e) => CanaryOutcome { model_id: c.model_id.clone(), outcome: None, error: Some(e.to_string()) },
            });
        }
        let mut trained = None;
        let mut published = None;
        if req.force_retrain || (req.retrain && self.should_retrain(usecase, now)) {
            let (model, report) = self.train(usecase, None)?;
            published = Some(self.publish(model, &report)?);
            trained = Some(report);
        }
        let drift = match (req.drift_baseline, req.drift_current) {
            (Some(b), Some(c)) => Some(self.check_drift(usecase, b, c)?),
            _ => None,
        };
        Ok(MaintenanceReport {
            flushed,
            canaries,
            trained,
            published,
            production_model: self.registry.snapshot().production_id(usecase).map(str::to_string),
            drift,
        })
    }

    /// Registry and training-table locations for CLI tools.
    pub fn data_dir(&self) -> Option<&Path> {
        self.config.data_dir.as_deref()
    }
}

impl Drop for Platform {
    fn drop(&mut self) {
        self.stage_tx.lock().take();
        if let Some(h) = self.worker.lock().take() {
            if h.thread().id() != std::thread::current().id() {
                let _ = h.join();
            }
        }
    }
}

fn staging_worker(platform: Weak<Platform>, rx: Receiver<StageMsg>) {
    while let Ok(msg) = rx.recv() {
        match platform.upgrade() {
            Some(p) => p.apply(msg),
            None => break,
        }
    }
}

fn to_value(out: DecisionOutput, space: DecisionSpace) -> Result<DecisionValue> {
    match (space, out) {
        (DecisionSpace::Binary, DecisionOutput::Boolean(b)) => Ok(DecisionValue::Boolean(b)),
        (DecisionSpace::Binary, DecisionOutput::Real(v)) => Ok(DecisionValue::Boolean(v != 0.0)),
        (DecisionSpace::Choice { k }, o) => {
            let v = o.as_f64().floor();
            if v >= 0.0 && v < k as f64 {
                Ok(DecisionValue::Choice(v as usize))
            } else {
                Err(Error::invalid(format!("choice {v} outside [0, {k})")))
            }
        }
        (_, o) => Ok(DecisionValue::Score(o.as_f64())),
    }
}
