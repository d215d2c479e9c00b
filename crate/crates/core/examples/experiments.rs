//! Deterministic A/B assignment, ATE with a confidence interval, and an
//! X-learner CATE model used to route units to the better arm.

use std::collections::BTreeMap;

use loopkit::experiments::{
    default_base_config, fit_hte, hte_assign, Arm, ArmTarget, ExperimentSpec, ExperimentStore, LearnerKind, OutcomeLog,
    OutcomeRow,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn main() -> loopkit::Result<()> {
    let store = ExperimentStore::new();
    let arm = |id: &str| Arm { arm_id: id.into(), target: ArmTarget::Treatment(id.into()), proportion: 0.5 };
    let exp = store.create(
        ExperimentSpec {
            experiment_id: Some("banner".into()),
            usecase: "banner".into(),
            arms: vec![arm("control"), arm("treatment")],
            salt: Some("2026-10".into()),
            control_arm: Some("control".into()),
            metric: r#"score pred("y");"#.into(),
            hte_holdout: None,
        },
        0,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let noise = Normal::new(0.0, 0.5).unwrap();
    let tau = |x: f64| 2.0 * x - 1.0;
    let mut log = OutcomeLog { rows: Vec::new() };
    for i in 0..10_000 {
        let uid = format!("user-{i}");
        let x: f64 = rng.random();
        let a = store.assign_unit(&exp, &uid, None)?;
        store.record_exposure(&a, &uid, vec![x])?;
        let treated = a.arm_id == "treatment";
        let y = 1.0 + if treated { tau(x) } else { 0.0 } + noise.sample(&mut rng);
        store.record_outcome("banner", &uid, &BTreeMap::from([("y".to_string(), y)]))?;
        log.rows.push(OutcomeRow { unit_id: uid, arm_id: a.arm_id.clone(), x: vec![x], y, randomized: true });
    }
    let ate = store.ate("banner", Some("treatment"))?;
    println!("ATE {:+.4} (se {:.4}, 95% CI [{:+.4}, {:+.4}])", ate.estimate, ate.se, ate.ci_low, ate.ci_high);

    let model = fit_hte(LearnerKind::X, &log, "treatment", "control", &default_base_config())?;
    for x in [0.1, 0.3, 0.5, 0.7, 0.9] {
        let arm = hte_assign(std::slice::from_ref(&model), "control", &[x])?;
        println!("x={x:.1}  cate {:+.3} (true {:+.3})  -> {arm}", model.predict_cate(&[x])?, tau(x));
    }
    Ok(())
}
