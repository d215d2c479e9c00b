//! Online join of decisions with observations inside the TTL window, then
//! the offline pass that fills delayed labels.

use std::collections::BTreeMap;
use std::sync::Arc;

use loopkit::blueprint::{Aggregation, DelayClass, LabelSpec};
use loopkit::features::FeatureVector;
use loopkit::joiner::{apply_updates, offline_join, DecisionRecord, Joiner};

fn main() -> loopkit::Result<()> {
    let labels = Arc::new(vec![
        LabelSpec::online_binary("click"),
        LabelSpec::real("revenue", Aggregation::Sum, DelayClass::Delayed),
    ]);
    let j = Joiner::new();
    for (i, at) in [0, 10, 20].into_iter().enumerate() {
        j.stage_decision(DecisionRecord {
            decision_id: format!("d{i}"),
            usecase: "shop".into(),
            blueprint_version: 1,
            features: FeatureVector { values: vec![i as f64], missing_mask: vec![false] },
            predictions: BTreeMap::from([("click".to_string(), 0.5)]),
            staged_at: at,
            ttl: 100,
            labels: labels.clone(),
            explored: false,
            position: None,
        })?;
    }
    let obs = |k: &str, v: f64| BTreeMap::from([(k.to_string(), v)]);
    let mut rows = Vec::new();
    // d0 clicks inside its window; d1 never clicks; d2 clicks too late
    rows.extend(j.ingest_observation("d0", &obs("click", 1.0), 30).finalized);
    j.ingest_observation("d0", &obs("revenue", 12.0), 500);
    j.ingest_observation("d0", &obs("revenue", 3.0), 900);
    rows.extend(j.flush_expired(200));
    j.ingest_observation("d2", &obs("click", 1.0), 250);
    println!("online rows:");
    for r in &rows {
        println!("  {} labels {:?} defaulted {:?}", r.decision_id, r.labels, r.defaulted);
    }
    let updates = offline_join(&j.archive(), &j.delayed_log(), 0, 1_000)?;
    let changed = apply_updates(&mut rows, &updates);
    println!("offline join updated {changed} rows:");
    for r in &rows {
        println!("  {} labels {:?}", r.decision_id, r.labels);
    }
    Ok(())
}
