//! Oracles shared by the integration tests. Nothing here calls into the
//! code under test except to drive it.

#![allow(dead_code)]

use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeMap, HashMap};
use std::hash::{Hash, Hasher};
use std::sync::{Arc, Mutex};

use loopkit::blueprint::{Aggregation, BlueprintDraft, DelayClass, LabelSpec};
use loopkit::clock::Millis;
use loopkit::experiments::{AteResult, ExperimentSpec, LearnerKind};
use loopkit::features::FeatureVector;
use loopkit::joiner::{apply_updates, offline_join, DecisionRecord, Joiner, TrainingRow};
use loopkit::service::{
    DecisionRequest, DecisionResponse, DisplayRequest, MaintenanceReport, MaintenanceRequest, ObservationBatch,
    RankingRequest, RankingResponse,
};
use loopkit::sim::LoopApi;
use loopkit::policy::{evaluate, parse_policy, DecisionOutput, EvalContext, PolicyError};
use loopkit::space::{DecisionSpace, DecisionValue};
use loopkit::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

// ---------------------------------------------------------------- joiner

const LABELS: [&str; 4] = ["click", "dwell", "revenue", "conv"];

fn label_specs() -> Arc<Vec<LabelSpec>> {
    Arc::new(vec![
        LabelSpec::online_binary("click"),
        LabelSpec::real("dwell", Aggregation::Sum, DelayClass::Online),
        LabelSpec::real("revenue", Aggregation::Sum, DelayClass::Delayed),
        LabelSpec::real("conv", Aggregation::Last, DelayClass::Delayed),
    ])
}

#[derive(Debug, Clone)]
pub enum Event {
    Stage { id: String, at: Millis, ttl: Millis },
    Ingest { id: String, obs: BTreeMap<String, f64>, at: Millis },
    Flush { at: Millis },
}

/// A random interleaving of `n` events over a pool of ids, with
/// non-decreasing timestamps (ties allowed).
pub fn random_events(seed: u64, n: usize) -> Vec<Event> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool = n / 6;
    let mut staged: Vec<usize> = Vec::new();
    let mut next = 0usize;
    let mut t: Millis = 0;
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        t += rng.random_range(0..=40);
        let r: f64 = rng.random();
        if r < 0.2 && next < pool {
            let ttl = [60, 300, 1_500][rng.random_range(0..3)];
            out.push(Event::Stage { id: format!("d{next}"), at: t, ttl });
            staged.push(next);
            next += 1;
        } else if r < 0.96 {
            // mostly staged ids, sometimes future or never-staged ones
            let idx = if staged.is_empty() || rng.random::<f64>() < 0.08 {
                rng.random_range(0..pool + 20)
            } else {
                let k = staged.len();
                staged[k - 1 - rng.random_range(0..k.min(40))]
            };
            let mut obs = BTreeMap::new();
            while obs.is_empty() {
                for name in LABELS {
                    if rng.random::<f64>() < 0.35 {
                        let v = match name {
                            "click" => f64::from(rng.random_range(0..2u8)),
                            "dwell" => f64::from(rng.random_range(1..6u8)),
                            "revenue" => f64::from(rng.random_range(1..10u8)),
                            _ => f64::from(rng.random_range(0..4u8)),
                        };
                        obs.insert(name.to_string(), v);
                    }
                }
            }
            out.push(Event::Ingest { id: format!("d{idx}"), obs, at: t });
        } else {
            out.push(Event::Flush { at: t });
        }
    }
    out
}

fn record(id: &str, at: Millis, ttl: Millis) -> DecisionRecord {
    let n: f64 = id[1..].parse().unwrap();
    DecisionRecord {
        decision_id: id.to_string(),
        usecase: "u".into(),
        blueprint_version: 1,
        features: FeatureVector { values: vec![n], missing_mask: vec![false] },
        predictions: BTreeMap::from([("click".to_string(), 0.5)]),
        staged_at: at,
        ttl,
        labels: label_specs(),
        explored: false,
        position: None,
    }
}

pub struct ReplayOutput {
    pub rows: Vec<TrainingRow>,
    /// Online rows emitted per decision id.
    pub emitted: HashMap<String, usize>,
}

/// Drives the real joiner through `events`, flushes everything, then runs
/// the offline join in consecutive windows split at the flush times.
pub fn replay_online_offline(events: &[Event]) -> ReplayOutput {
    let j = Joiner::new();
    let mut rows = Vec::new();
    let mut flushes = vec![0];
    let mut last = 0;
    for e in events {
        match e {
            Event::Stage { id, at, ttl } => {
                j.stage_decision(record(id, *at, *ttl)).unwrap();
                last = *at;
            }
            Event::Ingest { id, obs, at } => {
                if let Some(r) = j.ingest_observation(id, obs, *at).finalized {
                    rows.push(r);
                }
                last = *at;
            }
            Event::Flush { at } => {
                rows.extend(j.flush_expired(*at));
                flushes.push(*at);
                last = *at;
            }
        }
    }
    let end = last + 10_000;
    rows.extend(j.flush_expired(end));
    flushes.push(end + 1);
    let mut emitted = HashMap::new();
    for r in &rows {
        *emitted.entry(r.decision_id.clone()).or_insert(0) += 1;
    }
    let (archive, delayed) = (j.archive(), j.delayed_log());
    for w in flushes.windows(2) {
        let ups = offline_join(&archive, &delayed, w[0], w[1]).unwrap();
        apply_updates(&mut rows, &ups);
    }
    rows.sort_by(|a, b| a.decision_id.cmp(&b.decision_id));
    ReplayOutput { rows, emitted }
}

/// Single pass over the whole event log: each decision's online labels
/// fold observations inside `[staged, staged + ttl)` until every online
/// label has a value; delayed labels fold every observation at or after
/// staging.
pub fn batch_join(events: &[Event]) -> Vec<TrainingRow> {
    let mut staged: BTreeMap<String, (Millis, Millis)> = BTreeMap::new();
    let mut obs_by_id: HashMap<String, Vec<(Millis, &BTreeMap<String, f64>)>> = HashMap::new();
    for e in events {
        match e {
            Event::Stage { id, at, ttl } => {
                staged.insert(id.clone(), (*at, *ttl));
            }
            Event::Ingest { id, obs, at } => obs_by_id.entry(id.clone()).or_default().push((*at, obs)),
            Event::Flush { .. } => {}
        }
    }
    let mut out = Vec::new();
    for (id, (s, ttl)) in staged {
        let obs = obs_by_id.get(&id).cloned().unwrap_or_default();
        let (mut click, mut dwell): (Option<f64>, Option<f64>) = (None, None);
        let mut ts = s + ttl;
        for (t, o) in &obs {
            if *t < s || *t >= s + ttl {
                continue;
            }
            if let Some(v) = o.get("click") {
                click = Some(click.unwrap_or(0.0).max(if *v != 0.0 { 1.0 } else { 0.0 }));
            }
            if let Some(v) = o.get("dwell") {
                dwell = Some(dwell.unwrap_or(0.0) + v);
            }
            if click.is_some() && dwell.is_some() {
                ts = *t;
                break;
            }
        }
        let mut labels = BTreeMap::new();
        let mut defaulted = Vec::new();
        match click {
            Some(v) => {
                labels.insert("click".to_string(), v);
            }
            None => {
                labels.insert("click".to_string(), 0.0);
                defaulted.push("click".to_string());
            }
        }
        if let Some(v) = dwell {
            labels.insert("dwell".to_string(), v);
        }
        let (mut revenue, mut conv) = (None, None);
        for (t, o) in &obs {
            if *t < s {
                continue;
            }
            if let Some(v) = o.get("revenue") {
                revenue = Some(revenue.unwrap_or(0.0) + v);
            }
            if let Some(v) = o.get("conv") {
                conv = Some(*v);
            }
        }
        if let Some(v) = revenue {
            labels.insert("revenue".to_string(), v);
        }
        if let Some(v) = conv {
            labels.insert("conv".to_string(), v);
        }
        let n: f64 = id[1..].parse().unwrap();
        out.push(TrainingRow {
            decision_id: id,
            usecase: "u".into(),
            blueprint_version: 1,
            features: vec![n],
            missing_mask: vec![false],
            predictions: BTreeMap::from([("click".to_string(), 0.5)]),
            labels,
            defaulted,
            explored: false,
            position: None,
            ts,
        });
    }
    out
}

/// Order-insensitive hash of a row set.
pub fn row_set_hash(rows: &[TrainingRow]) -> u64 {
    let mut lines: Vec<String> = rows.iter().map(|r| serde_json::to_string(r).unwrap()).collect();
    lines.sort();
    let mut h = DefaultHasher::new();
    lines.hash(&mut h);
    h.finish()
}

/// `Ok` when online+offline output equals the batch oracle for one seed.
pub fn check_replay(seed: u64, n: usize) -> std::result::Result<(), String> {
    let events = random_events(seed, n);
    let got = replay_online_offline(&events);
    if let Some((id, k)) = got.emitted.iter().find(|(_, k)| **k > 1) {
        return Err(format!("seed {seed}: decision {id} produced {k} online rows"));
    }
    let want = batch_join(&events);
    if row_set_hash(&got.rows) != row_set_hash(&want) {
        let diff = got.rows.iter().zip(&want).find(|(a, b)| a != b);
        return Err(format!(
            "seed {seed}: {} rows vs {} expected; first difference {diff:?}",
            got.rows.len(),
            want.len()
        ));
    }
    Ok(())
}

// ------------------------------------------------------------------ gbdt

/// Exhaustive best first split under squared loss: every feature, every
/// midpoint between consecutive distinct values, scored by the drop in
/// sum of squared errors. Returns `(feature, threshold, gain)`.
pub fn brute_force_root(x: &[Vec<f64>], y: &[f64]) -> Option<(usize, f64, f64)> {
    let sse = |idx: &[usize]| -> f64 {
        if idx.is_empty() {
            return 0.0;
        }
        let m = idx.iter().map(|&i| y[i]).sum::<f64>() / idx.len() as f64;
        idx.iter().map(|&i| (y[i] - m).powi(2)).sum()
    };
    let all: Vec<usize> = (0..y.len()).collect();
    let parent = sse(&all);
    let mut best: Option<(usize, f64, f64)> = None;
    for f in 0..x[0].len() {
        let mut vals: Vec<f64> = x.iter().map(|r| r[f]).collect();
        vals.sort_by(f64::total_cmp);
        vals.dedup();
        for w in vals.windows(2) {
            let thr = (w[0] + w[1]) / 2.0;
            let (l, r): (Vec<usize>, Vec<usize>) = all.iter().partition(|&&i| x[i][f] < thr);
            let gain = parent - sse(&l) - sse(&r);
            if best.is_none_or(|b| gain > b.2) {
                best = Some((f, thr, gain));
            }
        }
    }
    best
}

/// Gain of a given split, for comparing against the brute-force maximum.
pub fn split_sse_gain(x: &[Vec<f64>], y: &[f64], f: usize, thr: f64) -> f64 {
    let sse = |idx: &[usize]| -> f64 {
        if idx.is_empty() {
            return 0.0;
        }
        let m = idx.iter().map(|&i| y[i]).sum::<f64>() / idx.len() as f64;
        idx.iter().map(|&i| (y[i] - m).powi(2)).sum()
    };
    let all: Vec<usize> = (0..y.len()).collect();
    let (l, r): (Vec<usize>, Vec<usize>) = all.iter().partition(|&&i| x[i][f] < thr);
    sse(&all) - sse(&l) - sse(&r)
}

pub fn tiny_dataset(seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(6..=30);
    let d = rng.random_range(1..=4);
    let x: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| (rng.random_range(0.0..10.0f64) * 4.0).round() / 4.0).collect()).collect();
    let y: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
    (x, y)
}

// ------------------------------------------------------------ policy DSL

#[derive(Debug, Deserialize)]
pub struct GoldenCase {
    pub name: String,
    pub source: String,
    #[serde(default)]
    pub preds: BTreeMap<String, f64>,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    #[serde(default)]
    pub features: BTreeMap<String, f64>,
    /// A bool for `decide`, a number for `score`, or an error class
    /// (`"syntax"`, `"semantic"`, `"eval"`).
    pub expect: serde_json::Value,
}

pub fn golden_corpus() -> Vec<GoldenCase> {
    let s = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data/policies.json")).unwrap();
    serde_json::from_str(&s).unwrap()
}

// -------------------------------------------------------------- prefetch

/// What the test saw of one prefetch decision.
#[derive(Debug, Clone, Default)]
pub struct Seen {
    pub x: Vec<f64>,
    pub prefetch: bool,
    pub null: bool,
    pub click: Option<bool>,
}

/// Forwards to another [`LoopApi`] and keeps its own copy of every binary
/// decision and the click later reported for it.
pub struct Recorder<A> {
    pub inner: A,
    pub seen: Mutex<BTreeMap<String, Seen>>,
}

impl<A: LoopApi> Recorder<A> {
    pub fn new(inner: A) -> Self {
        Self { inner, seen: Mutex::new(BTreeMap::new()) }
    }
}

impl<A: LoopApi> LoopApi for Recorder<A> {
    fn controls_clock(&self) -> bool {
        self.inner.controls_clock()
    }
    fn set_time(&self, t: Millis) {
        self.inner.set_time(t)
    }
    fn now(&self) -> Result<Millis> {
        self.inner.now()
    }
    fn register_usecase(&self, usecase: &str, space: DecisionSpace) -> Result<()> {
        self.inner.register_usecase(usecase, space)
    }
    fn create_blueprint(&self, usecase: &str, draft: &BlueprintDraft) -> Result<u32> {
        self.inner.create_blueprint(usecase, draft)
    }
    fn activate(&self, usecase: &str, version: u32) -> Result<()> {
        self.inner.activate(usecase, version)
    }
    fn get_decision(&self, req: &DecisionRequest) -> Result<DecisionResponse> {
        let resp = self.inner.get_decision(req)?;
        let mut keys: Vec<(usize, f64)> = req
            .application_context
            .iter()
            .filter_map(|(k, v)| Some((k.strip_prefix('x')?.parse().ok()?, v.as_f64()?)))
            .collect();
        keys.sort_by_key(|(i, _)| *i);
        self.seen.lock().unwrap().insert(
            req.decision_id.clone(),
            Seen {
                x: keys.into_iter().map(|(_, v)| v).collect(),
                prefetch: matches!(resp.decision, Some(DecisionValue::Boolean(true))),
                null: resp.decision.is_none(),
                click: None,
            },
        );
        Ok(resp)
    }
    fn log_observations(&self, batch: &ObservationBatch) -> Result<()> {
        if let (Some(s), Some(c)) =
            (self.seen.lock().unwrap().get_mut(&batch.decision_id), batch.observations.get("click"))
        {
            s.click = Some(*c == 1.0);
        }
        self.inner.log_observations(batch)
    }
    fn get_ranking(&self, req: &RankingRequest) -> Result<RankingResponse> {
        self.inner.get_ranking(req)
    }
    fn log_display(&self, req: &DisplayRequest) -> Result<()> {
        self.inner.log_display(req)
    }
    fn maintain(&self, usecase: &str, req: &MaintenanceRequest) -> Result<MaintenanceReport> {
        self.inner.maintain(usecase, req)
    }
    fn create_experiment(&self, spec: &ExperimentSpec) -> Result<String> {
        self.inner.create_experiment(spec)
    }
    fn advance_phase(&self, experiment_id: &str, learner: LearnerKind) -> Result<()> {
        self.inner.advance_phase(experiment_id, learner)
    }
    fn ate(&self, experiment_id: &str) -> Result<AteResult> {
        self.inner.ate(experiment_id)
    }
    fn predict_cate(&self, experiment_id: &str, x: &[f64]) -> Result<BTreeMap<String, f64>> {
        self.inner.predict_cate(experiment_id, x)
    }
}

/// Per-day mean utility of the platform's decisions and of the three
/// reference policies, recomputed from the recorded traffic. Decision ids
/// look like `{usecase}-{day}-{i}`.
#[derive(Debug, Clone, Copy, Default)]
pub struct DayUtility {
    pub served: f64,
    pub oracle: f64,
    pub always: f64,
    pub never: f64,
    pub nulls: usize,
    pub n: usize,
}

pub fn prefetch_utilities(
    seen: &BTreeMap<String, Seen>,
    theta: &[f64],
    bias: f64,
    cost: f64,
) -> BTreeMap<u32, DayUtility> {
    let mut days: BTreeMap<u32, DayUtility> = BTreeMap::new();
    for (id, s) in seen {
        let mut parts = id.rsplitn(3, '-');
        let (_, day) = (parts.next(), parts.next().and_then(|d| d.parse::<u32>().ok()));
        let Some(day) = day else { continue };
        let click = f64::from(u8::from(s.click.expect("every decision gets a click report")));
        let gain = click - cost;
        let p = sigmoid(theta.iter().zip(&s.x).map(|(a, b)| a * b).sum::<f64>() + bias);
        let d = days.entry(day).or_default();
        d.n += 1;
        d.nulls += usize::from(s.null);
        if s.prefetch {
            d.served += gain;
        }
        if p > cost {
            d.oracle += gain;
        }
        d.always += gain;
    }
    for d in days.values_mut() {
        let n = d.n as f64;
        d.served /= n;
        d.oracle /= n;
        d.always /= n;
    }
    days
}

fn error_class(e: &PolicyError) -> &'static str {
    match e {
        PolicyError::Syntax { .. } => "syntax",
        PolicyError::Semantic(_) => "semantic",
        PolicyError::Eval(_) => "eval",
    }
}

/// `None` when the case matches, otherwise a description of the mismatch.
pub fn run_case(c: &GoldenCase) -> Option<String> {
    let ctx = EvalContext { predictions: c.preds.clone(), features: c.features.clone(), parameters: c.params.clone() };
    let got = parse_policy(&c.source).and_then(|p| evaluate(&p, &ctx));
    let ok = match (&got, &c.expect) {
        (Ok(DecisionOutput::Boolean(b)), serde_json::Value::Bool(want)) => b == want,
        (Ok(DecisionOutput::Real(v)), serde_json::Value::Number(n)) => *v == n.as_f64().unwrap(),
        (Err(e), serde_json::Value::String(class)) => error_class(e) == class,
        _ => false,
    };
    (!ok).then(|| format!("{}: got {got:?}, want {}", c.name, c.expect))
}


/// Index of the largest score; ties go to the lowest index.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Runs `sets` random candidate sets and returns how many had a different
/// winner under a positively scaled and shifted copy of the score.
pub fn argmax_violations(sets: usize, seed: u64) -> usize {
    let base = parse_policy(r#"score param("w_click") * pred("click") + param("w_rating") * pred("rating");"#).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = 0;
    for _ in 0..sets {
        let k: f64 = rng.random_range(0.01..100.0);
        let c: f64 = rng.random_range(-50.0..50.0);
        let scaled = parse_policy(&format!(
            r#"let s = param("w_click") * pred("click") + param("w_rating") * pred("rating"); score {k} * s + {c};"#
        ))
        .unwrap();
        let (wc, wr) = (rng.random_range(0.0..3.0), rng.random_range(0.0..3.0));
        let n = rng.random_range(2..30);
        let mut a = Vec::with_capacity(n);
        let mut b = Vec::with_capacity(n);
        for _ in 0..n {
            let ctx = EvalContext::default()
                .with_parameter("w_click", wc)
                .with_parameter("w_rating", wr)
                .with_prediction("click", rng.random())
                .with_prediction("rating", rng.random());
            a.push(evaluate(&base, &ctx).unwrap().as_f64());
            b.push(evaluate(&scaled, &ctx).unwrap().as_f64());
        }
        violations += usize::from(argmax(&a) != argmax(&b));
    }
    violations
}


fn random_expr(rng: &mut ChaCha8Rng, depth: usize) -> String {
    if depth == 0 || rng.random::<f64>() < 0.25 {
        return match rng.random_range(0..5) {
            0 => rng.random_range(0..1000).to_string(),
            1 => format!("{}", rng.random_range(0.0..100.0f64)),
            2 => format!("pred(\"{}\")", ["click", "rating", "ctr"][rng.random_range(0..3)]),
            3 => format!("feature(\"{}\")", ["age", "price"][rng.random_range(0..2)]),
            _ => format!("param(\"{}\")", ["w", "t"][rng.random_range(0..2)]),
        };
    }
    let d = depth - 1;
    match rng.random_range(0..6) {
        0 | 1 => {
            let op = ["+", "-", "*", "/", "<", "<=", ">", ">=", "=="][rng.random_range(0..9)];
            format!("{} {op} {}", random_expr(rng, d), random_expr(rng, d))
        }
        2 => format!("({})", random_expr(rng, d)),
        3 => format!("-{}", random_expr(rng, d)),
        4 => format!("{}({})", ["log", "exp", "abs"][rng.random_range(0..3)], random_expr(rng, d)),
        _ => {
            let f = ["min", "max", "if", "clamp"][rng.random_range(0..4)];
            let n = if matches!(f, "min" | "max") { 2 } else { 3 };
            let args: Vec<String> = (0..n).map(|_| random_expr(rng, d)).collect();
            format!("{f}({})", args.join(", "))
        }
    }
}

/// A random well-formed program with up to two `let` bindings.
pub fn random_program(seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lets = rng.random_range(0..3);
    let mut src = String::new();
    for i in 0..lets {
        src.push_str(&format!("let v{i} = {};\n", random_expr(&mut rng, 4)));
    }
    let mut last = random_expr(&mut rng, 4);
    if lets > 0 {
        last = format!("{last} + v{}", lets - 1);
    }
    let kw = if rng.random() { "decide" } else { "score" };
    src.push_str(&format!("{kw} {last};"));
    src
}
