//! Model registry lifecycle: publish, shadow-evaluate, promote only when
//! strictly better, and roll back.

use std::collections::BTreeMap;

use loopkit::blueprint::{LabelKind, ModelFamily};
use loopkit::joiner::TrainingRow;
use loopkit::registry::Registry;
use loopkit::trainer::{GbdtModel, Head, HeadModel, Loss, Model, MODEL_FORMAT_VERSION};

fn constant(id: &str, p: f64) -> Model {
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

fn main() -> loopkit::Result<()> {
    // 30% click rate
    let rows: Vec<TrainingRow> = (0..200)
        .map(|i| TrainingRow {
            decision_id: format!("r{i}"),
            usecase: "u".into(),
            blueprint_version: 1,
            features: vec![0.0],
            missing_mask: vec![false],
            predictions: BTreeMap::new(),
            labels: BTreeMap::from([("click".to_string(), f64::from(u8::from(i % 10 < 3)))]),
            defaulted: vec![],
            explored: false,
            position: None,
            ts: 0,
        })
        .collect();
    let project = |_: &Model, r: &TrainingRow| Some(r.features.clone());
    let reg = Registry::new().with_min_eval_rows(100);
    for (t, (id, p)) in [("m1", 0.6), ("m2", 0.35), ("m3", 0.5), ("m4", 0.3)].into_iter().enumerate() {
        reg.publish(constant(id, p), BTreeMap::new(), t as i64)?;
        let s = reg.shadow_evaluate(id, &rows, 1.0, &project)?;
        let outcome = reg.promote_if_better(id, t as i64)?;
        println!(
            "{id}: canary logloss {:.4} vs production {:?} -> {outcome:?}",
            s.canary_metric,
            s.production_metric.map(|m| (m * 1e4).round() / 1e4)
        );
    }
    println!("production: {:?}", reg.snapshot().production_id("u"));
    println!("rollback reinstates {:?}", reg.rollback("u", 10)?);
    Ok(())
}
