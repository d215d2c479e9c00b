use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::{Accumulator, ArchivedDecision, DelayedObservation, TrainingRow};
use crate::clock::Millis;
use crate::error::{Error, Result};

/// Delayed-label values for one decision, replacing any earlier values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowUpdate {
    pub decision_id: String,
    pub labels: BTreeMap<String, f64>,
}

/// Joins delayed observations against archived decisions.
///
/// Every decision with at least one delayed-class observation in
/// `[since, until)` gets an update aggregating all of its delayed
/// observations with `staged_at <= observed_at < until`. Re-running with
/// the same inputs yields the same updates.
pub fn offline_join(
    archive: &[ArchivedDecision],
    delayed: &[DelayedObservation],
    since: Millis,
    until: Millis,
) -> Result<Vec<RowUpdate>> {
    if until < since {
        return Err(Error::invalid(format!("window end {until} precedes start {since}")));
    }
    let decisions: HashMap<&str, &ArchivedDecision> =
        archive.iter().map(|d| (d.decision_id.as_str(), d)).collect();

    let mut grouped: BTreeMap<&str, Vec<&DelayedObservation>> = BTreeMap::new();
    for o in delayed {
        grouped.entry(o.decision_id.as_str()).or_default().push(o);
    }

    let mut updates = Vec::new();
    for (id, mut obs) in grouped {
        let Some(d) = decisions.get(id) else { continue };
        if d.delayed_labels.is_empty() {
            continue;
        }
        let relevant = |o: &DelayedObservation| {
            o.observed_at >= d.staged_at
                && o.observed_at < until
                && d.delayed_labels.iter().any(|l| o.observations.contains_key(&l.name))
        };
        if !obs.iter().any(|o| o.observed_at >= since && relevant(o)) {
            continue;
        }
        // stable: equal timestamps keep log order
        obs.sort_by_key(|o| o.observed_at);
        let mut labels = BTreeMap::new();
        for spec in &d.delayed_labels {
            let mut acc = Accumulator::new(spec.aggregation);
            for o in obs.iter().filter(|o| relevant(o)) {
                if let Some(v) = o.observations.get(&spec.name) {
                    acc.fold(*v);
                }
            }
            if let Some(v) = acc.value() {
                labels.insert(spec.name.clone(), v);
            }
        }
        updates.push(RowUpdate { decision_id: id.to_string(), labels });
    }
    Ok(updates)
}

/// Applies updates to rows in place; returns how many rows changed.
pub fn apply_updates(rows: &mut [TrainingRow], updates: &[RowUpdate]) -> usize {
    let by_id: HashMap<&str, &RowUpdate> = updates.iter().map(|u| (u.decision_id.as_str(), u)).collect();
    let mut n = 0;
    for row in rows.iter_mut() {
        if let Some(u) = by_id.get(row.decision_id.as_str()) {
            let mut changed = false;
            for (k, v) in &u.labels {
                changed |= row.labels.insert(k.clone(), *v) != Some(*v);
            }
            n += usize::from(changed);
        }
    }
    n
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blueprint::{Aggregation, DelayClass, LabelSpec};

    fn archived(id: &str, staged_at: Millis) -> ArchivedDecision {
        ArchivedDecision {
            decision_id: id.into(),
            usecase: "u".into(),
            blueprint_version: 1,
            staged_at,
            delayed_labels: vec![LabelSpec::real("revenue", Aggregation::Sum, DelayClass::Delayed)],
        }
    }

    fn obs(id: &str, v: f64, at: Millis) -> DelayedObservation {
        DelayedObservation {
            decision_id: id.into(),
            observations: BTreeMap::from([("revenue".to_string(), v)]),
            observed_at: at,
        }
    }

    #[test]
    fn aggregates_up_to_window_end() {
        let archive = vec![archived("a", 0), archived("b", 0)];
        let log = vec![obs("a", 1.0, 10), obs("a", 2.0, 20), obs("a", 4.0, 200), obs("b", 5.0, 5)];
        let ups = offline_join(&archive, &log, 15, 100).unwrap();
        // b has nothing inside [15, 100)
        assert_eq!(ups.len(), 1);
        assert_eq!(ups[0].labels["revenue"], 3.0);
    }

    #[test]
    fn idempotent_and_validates_window() {
        let archive = vec![archived("a", 0)];
        let log = vec![obs("a", 1.0, 10), obs("a", 2.0, 20)];
        let first = offline_join(&archive, &log, 0, 100).unwrap();
        assert_eq!(first, offline_join(&archive, &log, 0, 100).unwrap());
        assert!(offline_join(&archive, &log, 10, 5).is_err());
    }

    #[test]
    fn leakage_excluded() {
        let archive = vec![archived("a", 50)];
        let log = vec![obs("a", 7.0, 40), obs("a", 1.0, 60)];
        let ups = offline_join(&archive, &log, 0, 100).unwrap();
        assert_eq!(ups[0].labels["revenue"], 1.0);
    }

    #[test]
    fn apply_replaces_labels() {
        let mut row = TrainingRow {
            decision_id: "a".into(),
            usecase: "u".into(),
            blueprint_version: 1,
            features: vec![],
            missing_mask: vec![],
            predictions: BTreeMap::new(),
            labels: BTreeMap::from([("revenue".to_string(), 9.0)]),
            defaulted: vec![],
            explored: false,
            position: None,
            ts: 0,
        };
        let ups = vec![RowUpdate { decision_id: "a".into(), labels: BTreeMap::from([("revenue".to_string(), 3.0)]) }];
        assert_eq!(apply_updates(std::slice::from_mut(&mut row), &ups), 1);
        assert_eq!(row.labels["revenue"], 3.0);
    }
}
