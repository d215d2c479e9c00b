//! Online join of staged decisions with observations under a TTL, offline
//! join of delayed observations, and the NDJSON training table.
//!
//! Label routing:
//! - online-class labels fold into the pending record while
//!   `staged_at <= observed_at < staged_at + ttl` and the record has not
//!   been finalized;
//! - delayed-class labels, and anything arriving for an unknown, expired or
//!   finalized decision, go to the delayed log and are applied by
//!   [`offline_join`].
//!
//! A pending record finalizes as soon as every online label has at least
//! one observation, otherwise at TTL expiry via [`Joiner::flush_expired`].

mod offline;
mod table;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::blueprint::{Aggregation, DelayClass, LabelKind, LabelSpec};
use crate::clock::Millis;
use crate::error::{Error, Result};
use crate::features::FeatureVector;
use crate::hashing::hash64;

pub use offline::{apply_updates, offline_join, RowUpdate};
pub use table::{append_ndjson, read_ndjson, read_rows, TrainingTable};

/// Integer input appended after the blueprint features of ranking usecases.
pub const POSITION_FEATURE: &str = "__position";

const SHARDS: usize = 16;

/// Everything logged at decision time for one decision (or one ranked item).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub decision_id: String,
    pub usecase: String,
    pub blueprint_version: u32,
    pub features: FeatureVector,
    pub predictions: BTreeMap<String, f64>,
    pub staged_at: Millis,
    pub ttl: Millis,
    pub labels: Arc<Vec<LabelSpec>>,
    pub explored: bool,
    pub position: Option<i64>,
}

/// A decision as kept for the offline join.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchivedDecision {
    pub decision_id: String,
    pub usecase: String,
    pub blueprint_version: u32,
    pub staged_at: Millis,
    /// Only the delayed-class labels; online labels never change offline.
    pub delayed_labels: Vec<LabelSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelayedObservation {
    pub decision_id: String,
    pub observations: BTreeMap<String, f64>,
    pub observed_at: Millis,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Routing {
    JoinedOnline,
    RoutedDelayed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestOutcome {
    pub routing: Routing,
    /// Set when this observation completed the online labels.
    pub finalized: Option<TrainingRow>,
}

/// A joined row. Field names are the training-table wire format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRow {
    pub decision_id: String,
    pub usecase: String,
    pub blueprint_version: u32,
    #[serde(with = "crate::features::nan_as_null")]
    pub features: Vec<f64>,
    pub missing_mask: Vec<bool>,
    pub predictions: BTreeMap<String, f64>,
    pub labels: BTreeMap<String, f64>,
    pub defaulted: Vec<String>,
    pub explored: bool,
    pub position: Option<i64>,
    pub ts: Millis,
}

impl TrainingRow {
    pub fn feature_vector(&self) -> FeatureVector {
        FeatureVector { values: self.features.clone(), missing_mask: self.missing_mask.clone() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Accumulator {
    aggregation: Aggregation,
    value: Option<f64>,
}

impl Accumulator {
    pub(crate) fn new(aggregation: Aggregation) -> Self {
        Self { aggregation, value: None }
    }

    pub(crate) fn fold(&mut self, v: f64) {
        self.value = Some(match (self.aggregation, self.value) {
            (Aggregation::Any, prev) => {
                let hit = if v != 0.0 { 1.0 } else { 0.0 };
                prev.map_or(hit, |p| p.max(hit))
            }
            (_, None) => v,
            (Aggregation::Last, Some(_)) => v,
            (Aggregation::Sum, Some(p)) => p + v,
            (Aggregation::Max, Some(p)) => p.max(v),
        });
    }

    pub(crate) fn value(&self) -> Option<f64> {
        self.value
    }
}

#[derive(Debug, Clone)]
pub struct PendingDecision {
    pub record: DecisionRecord,
    partial: BTreeMap<String, Accumulator>,
}

impl PendingDecision {
    fn new(record: DecisionRecord) -> Self {
        let partial = record
            .labels
            .iter()
            .filter(|l| l.delay_class == DelayClass::Online)
            .map(|l| (l.name.clone(), Accumulator::new(l.aggregation)))
            .collect();
        Self { record, partial }
    }

    fn expires_at(&self) -> Millis {
        self.record.staged_at + self.record.ttl
    }

    fn online_complete(&self) -> bool {
        !self.partial.is_empty() && self.partial.values().all(|a| a.value().is_some())
    }

    fn finalize(self, at: Millis) -> TrainingRow {
        let mut labels = BTreeMap::new();
        let mut defaulted = Vec::new();
        for spec in self.record.labels.iter().filter(|l| l.delay_class == DelayClass::Online) {
            match self.partial.get(&spec.name).and_then(Accumulator::value) {
                Some(v) => {
                    labels.insert(spec.name.clone(), v);
                }
                None if spec.value_kind == LabelKind::Binary => {
                    labels.insert(spec.name.clone(), 0.0);
                    defaulted.push(spec.name.clone());
                }
                None => {}
            }
        }
        let r = self.record;
        TrainingRow {
            decision_id: r.decision_id,
            usecase: r.usecase,
            blueprint_version: r.blueprint_version,
            features: r.features.values,
            missing_mask: r.features.missing_mask,
            predictions: r.predictions,
            labels,
            defaulted,
            explored: r.explored,
            position: r.position,
            ts: at,
        }
    }
}

#[derive(Default)]
struct Shard {
    pending: HashMap<String, PendingDecision>,
    finalized: HashSet<String>,
}

/// Real-time joiner. Each decision id lives in one shard, so mutations for
/// an id are serialized while distinct ids proceed in parallel.
pub struct Joiner {
    shards: Vec<Mutex<Shard>>,
    delayed: Mutex<Vec<DelayedObservation>>,
    archive: Mutex<Vec<ArchivedDecision>>,
}

impl Default for Joiner {
    fn default() -> Self {
        Self::new()
    }
}

impl Joiner {
    pub fn new() -> Self {
        Self {
            shards: (0..SHARDS).map(|_| Mutex::new(Shard::default())).collect(),
            delayed: Mutex::new(Vec::new()),
            archive: Mutex::new(Vec::new()),
        }
    }

    fn shard(&self, id: &str) -> &Mutex<Shard> {
        &self.shards[(hash64(id.as_bytes()) % SHARDS as u64) as usize]
    }

    /// Whether `id` was ever staged (pending or already finalized).
    pub fn is_known(&self, id: &str) -> bool {
        let s = self.shard(id).lock();
        s.pending.contains_key(id) || s.finalized.contains(id)
    }

    pub fn stage_decision(&self, record: DecisionRecord) -> Result<()> {
        if record.ttl <= 0 {
            return Err(Error::invalid(format!("ttl must be positive, got {}", record.ttl)));
        }
        if record.decision_id.is_empty() {
            return Err(Error::invalid("decision_id is empty"));
        }
        let archived = ArchivedDecision {
            decision_id: record.decision_id.clone(),
            usecase: record.usecase.clone(),
            blueprint_version: record.blueprint_version,
            staged_at: record.staged_at,
            delayed_labels: record
                .labels
                .iter()
                .filter(|l| l.delay_class == DelayClass::Delayed)
                .cloned()
                .collect(),
        };
        {
            let mut s = self.shard(&record.decision_id).lock();
            if s.pending.contains_key(&record.decision_id) || s.finalized.contains(&record.decision_id) {
                return Err(Error::duplicate("decision", &record.decision_id));
            }
            s.pending.insert(record.decision_id.clone(), PendingDecision::new(record));
        }
        self.archive.lock().push(archived);
        Ok(())
    }

    /// Routes one observation batch. Total: unknown ids are logged as
    /// delayed.
    pub fn ingest_observation(
        &self,
        decision_id: &str,
        observations: &BTreeMap<String, f64>,
        observed_at: Millis,
    ) -> IngestOutcome {
        let mut routed_delayed = BTreeMap::new();
        let mut joined = false;
        let mut finalized = None;
        {
            let mut s = self.shard(decision_id).lock();
            let within = s.pending.get(decision_id).is_some_and(|p| {
                observed_at >= p.record.staged_at && observed_at < p.expires_at()
            });
            if within {
                let p = s.pending.get_mut(decision_id).expect("checked above");
                for (name, v) in observations {
                    match p.partial.get_mut(name) {
                        Some(acc) => {
                            acc.fold(*v);
                            joined = true;
                        }
                        None => {
                            routed_delayed.insert(name.clone(), *v);
                        }
                    }
                }
                if p.online_complete() {
                    let p = s.pending.remove(decision_id).expect("present");
                    s.finalized.insert(decision_id.to_string());
                    finalized = Some(p.finalize(observed_at));
                }
            } else {
                routed_delayed = observations.clone();
            }
        }
        if !routed_delayed.is_empty() {
            self.delayed.lock().push(DelayedObservation {
                decision_id: decision_id.to_string(),
                observations: routed_delayed,
                observed_at,
            });
        }
        let routing = if joined { Routing::JoinedOnline } else { Routing::RoutedDelayed };
        IngestOutcome { routing, finalized }
    }

    /// Attaches a display position to a pending ranked item; the position
    /// slot of its feature vector is updated so training sees it.
    pub fn set_position(&self, decision_id: &str, position: Option<i64>) -> Result<()> {
        let mut s = self.shard(decision_id).lock();
        let p = s
            .pending
            .get_mut(decision_id)
            .ok_or_else(|| Error::not_found("pending item", decision_id))?;
        p.record.position = position;
        let fv = &mut p.record.features;
        if let (Some(v), Some(m)) = (fv.values.last_mut(), fv.missing_mask.last_mut()) {
            match position {
                Some(pos) => {
                    *v = pos as f64;
                    *m = false;
                }
                None => {
                    *v = f64::NAN;
                    *m = true;
                }
            }
        }
        Ok(())
    }

    /// Finalizes every record whose TTL has elapsed at `now`, in id order.
    pub fn flush_expired(&self, now: Millis) -> Vec<TrainingRow> {
        let mut rows = Vec::new();
        for shard in &self.shards {
            let mut s = shard.lock();
            let expired: Vec<String> = s
                .pending
                .iter()
                .filter(|(_, p)| p.expires_at() <= now)
                .map(|(id, _)| id.clone())
                .collect();
            for id in expired {
                let p = s.pending.remove(&id).expect("listed above");
                s.finalized.insert(id);
                let at = p.expires_at();
                rows.push(p.finalize(at));
            }
        }
        rows.sort_by(|a, b| a.decision_id.cmp(&b.decision_id));
        rows
    }

    pub fn pending_count(&self) -> usize {
        self.shards.iter().map(|s| s.lock().pending.len()).sum()
    }

    pub fn pending(&self, decision_id: &str) -> Option<PendingDecision> {
        self.shard(decision_id).lock().pending.get(decision_id).cloned()
    }

    pub fn delayed_log(&self) -> Vec<DelayedObservation> {
        self.delayed.lock().clone()
    }

    pub fn archive(&self) -> Vec<ArchivedDecision> {
        self.archive.lock().clone()
    }

    /// Drains the delayed log and archive, e.g. after persisting them.
    pub fn take_logs(&self) -> (Vec<ArchivedDecision>, Vec<DelayedObservation>) {
        (std::mem::take(&mut *self.archive.lock()), std::mem::take(&mut *self.delayed.lock()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn labels() -> Arc<Vec<LabelSpec>> {
        Arc::new(vec![
            LabelSpec::online_binary("click"),
            LabelSpec::real("retained", Aggregation::Max, DelayClass::Delayed),
        ])
    }

    pub(crate) fn record(id: &str, staged_at: Millis, ttl: Millis, labels: Arc<Vec<LabelSpec>>) -> DecisionRecord {
        DecisionRecord {
            decision_id: id.to_string(),
            usecase: "u".into(),
            blueprint_version: 1,
            features: FeatureVector { values: vec![1.0, f64::NAN], missing_mask: vec![false, true] },
            predictions: BTreeMap::from([("click".to_string(), 0.4)]),
            staged_at,
            ttl,
            labels,
            explored: false,
            position: None,
        }
    }

    fn obs(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn stage_then_ingest_joins() {
        let j = Joiner::new();
        j.stage_decision(record("d1", 0, 100, labels())).unwrap();
        let out = j.ingest_observation("d1", &obs(&[("click", 1.0)]), 10);
        assert_eq!(out.routing, Routing::JoinedOnline);
        let row = out.finalized.expect("online labels complete");
        assert_eq!(row.labels, obs(&[("click", 1.0)]));
        assert!(row.defaulted.is_empty());
        assert_eq!(row.ts, 10);
        assert!(j.flush_expired(1_000).is_empty());
    }

    #[test]
    fn duplicate_and_ttl_validation() {
        let j = Joiner::new();
        j.stage_decision(record("d1", 0, 100, labels())).unwrap();
        assert!(matches!(j.stage_decision(record("d1", 0, 100, labels())), Err(Error::Duplicate { .. })));
        assert!(j.stage_decision(record("d2", 0, 0, labels())).is_err());
        j.flush_expired(100);
        // finalized ids stay reserved
        assert!(j.stage_decision(record("d1", 200, 100, labels())).is_err());
    }

    #[test]
    fn aggregation_semantics() {
        let mk = |agg| Arc::new(vec![LabelSpec::real("v", agg, DelayClass::Online), LabelSpec::online_binary("done")]);
        for (agg, vals, expect) in [
            (Aggregation::Sum, vec![1.0, 1.0], 2.0),
            (Aggregation::Last, vec![0.0, 1.0], 1.0),
            (Aggregation::Max, vec![3.0, 1.0], 3.0),
            (Aggregation::Any, vec![0.0, 5.0], 1.0),
        ] {
            let j = Joiner::new();
            j.stage_decision(record("d", 0, 100, mk(agg))).unwrap();
            for (i, v) in vals.iter().enumerate() {
                j.ingest_observation("d", &obs(&[("v", *v)]), i as Millis);
            }
            let rows = j.flush_expired(100);
            assert_eq!(rows[0].labels["v"], expect, "{agg:?}");
            assert_eq!(rows[0].labels["done"], 0.0);
            assert_eq!(rows[0].defaulted, vec!["done".to_string()]);
        }
    }

    #[test]
    fn expiry_boundary_routes_delayed() {
        let j = Joiner::new();
        j.stage_decision(record("d1", 0, 100, labels())).unwrap();
        let out = j.ingest_observation("d1", &obs(&[("click", 1.0)]), 100);
        assert_eq!(out.routing, Routing::RoutedDelayed);
        assert_eq!(j.delayed_log().len(), 1);
        let rows = j.flush_expired(100);
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].labels["click"], 0.0);
        assert_eq!(rows[0].defaulted, vec!["click".to_string()]);
        assert_eq!(rows[0].ts, 100);
    }

    #[test]
    fn early_observation_never_joins() {
        let j = Joiner::new();
        j.stage_decision(record("d1", 50, 100, labels())).unwrap();
        assert_eq!(j.ingest_observation("d1", &obs(&[("click", 1.0)]), 49).routing, Routing::RoutedDelayed);
    }

    #[test]
    fn delayed_class_labels_go_to_log() {
        let j = Joiner::new();
        j.stage_decision(record("d1", 0, 100, labels())).unwrap();
        let out = j.ingest_observation("d1", &obs(&[("retained", 1.0)]), 5);
        assert_eq!(out.routing, Routing::RoutedDelayed);
        assert!(out.finalized.is_none());
        assert_eq!(j.delayed_log()[0].observations, obs(&[("retained", 1.0)]));
    }

    #[test]
    fn unknown_id_routed_delayed() {
        let j = Joiner::new();
        assert_eq!(j.ingest_observation("ghost", &obs(&[("click", 1.0)]), 5).routing, Routing::RoutedDelayed);
    }

    #[test]
    fn many_observed_then_flush_emits_nothing() {
        let j = Joiner::new();
        let l = Arc::new(vec![LabelSpec::online_binary("click")]);
        let mut emitted = 0;
        for i in 0..10_000 {
            j.stage_decision(record(&format!("d{i}"), i, 1_000, l.clone())).unwrap();
        }
        for i in 0..10_000 {
            if j.ingest_observation(&format!("d{i}"), &obs(&[("click", 1.0)]), i + 1).finalized.is_some() {
                emitted += 1;
            }
        }
        assert_eq!(emitted, 10_000);
        assert!(j.flush_expired(1_000_000).is_empty());
        assert_eq!(j.pending_count(), 0);
    }

    #[test]
    fn position_updates_last_slot() {
        let j = Joiner::new();
        j.stage_decision(record("d1:0", 0, 100, labels())).unwrap();
        j.set_position("d1:0", Some(2)).unwrap();
        let p = j.pending("d1:0").unwrap();
        assert_eq!(p.record.position, Some(2));
        assert_eq!(p.record.features.values[1], 2.0);
        assert!(!p.record.features.missing_mask[1]);
        assert!(j.set_position("nope", Some(0)).is_err());
    }
}
