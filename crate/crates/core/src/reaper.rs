//! Feature reaping: permutation importance over blueprint features, removal
//! of the weakest group each round, and a retrain-and-verify gate.

use std::collections::{BTreeMap, HashSet};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blueprint::StrategyBlueprint;
use crate::error::{Error, Result};
use crate::features::FeatureRef;
use crate::hashing::mix64;
use crate::policy::parse_policy;
use crate::service::Platform;
use crate::trainer::{build_dataset, primary_metric, train, Dataset, Model, TrainReport};

pub const IMPORTANCE_REPEATS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReapParams {
    pub step_fraction: f64,
    pub tolerance: f64,
    pub max_rounds: usize,
    pub seed: u64,
}

impl Default for ReapParams {
    fn default() -> Self {
        Self { step_fraction: 0.1, tolerance: 0.005, max_rounds: 5, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReapRound {
    pub removed: Vec<String>,
    pub metric_before: f64,
    pub metric_after: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReapReport {
    pub usecase: String,
    pub original_version: u32,
    /// New blueprint version holding the reduced feature set, if any round
    /// was accepted.
    pub final_version: Option<u32>,
    pub canary_id: Option<String>,
    pub rounds: Vec<ReapRound>,
    pub original_metric: f64,
    pub final_metric: f64,
    pub features_before: usize,
    pub features_after: usize,
    pub slots_before: usize,
    pub slots_after: usize,
    /// Change in assembled slots per decision; negative means cheaper.
    pub cost_delta: i64,
    pub kept: Vec<String>,
}

/// Result of reaping a dataset without touching any store.
#[derive(Debug, Clone)]
pub struct ReapOutcome {
    pub rounds: Vec<ReapRound>,
    pub kept: Vec<FeatureRef>,
    pub original_metric: f64,
    pub final_metric: f64,
}

pub fn feature_key(f: &FeatureRef) -> String {
    format!("{}.{}", f.group, f.name)
}

/// Slot ranges of each feature config entry within the model input.
fn slot_ranges(features: &[FeatureRef]) -> Vec<std::ops::Range<usize>> {
    let mut o = 0;
    features
        .iter()
        .map(|f| {
            let r = o..o + f.width();
            o = r.end;
            r
        })
        .collect()
}

fn holdout_part(ds: &Dataset) -> (Vec<Vec<f64>>, Vec<BTreeMap<String, f64>>) {
    let mut x = Vec::new();
    let mut labels = Vec::new();
    for i in (0..ds.len()).filter(|&i| ds.holdout[i]) {
        x.push(ds.x[i].clone());
        labels.push(ds.tasks.iter().filter_map(|t| Some((t.name.clone(), t.values[i]?))).collect());
    }
    (x, labels)
}

/// Mean increase of the primary metric (lower is better) when the slots of
/// each group are shuffled together across rows, `IMPORTANCE_REPEATS`
/// times. Deterministic given `seed`.
pub fn importance(
    model: &Model,
    x: &[Vec<f64>],
    labels: &[BTreeMap<String, f64>],
    groups: &[std::ops::Range<usize>],
    seed: u64,
) -> Result<Vec<f64>> {
    let base = primary_metric(model, x, labels).ok_or_else(|| Error::InsufficientData("no labelled validation rows".into()))?;
    let mut out = Vec::with_capacity(groups.len());
    let mut shuffled = x.to_vec();
    for (g, range) in groups.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed ^ (g as u64 + 1)));
        let mut total = 0.0;
        for _ in 0..IMPORTANCE_REPEATS {
            let mut perm: Vec<usize> = (0..x.len()).collect();
            perm.shuffle(&mut rng);
            for (row, &src) in shuffled.iter_mut().zip(&perm) {
                row[range.clone()].copy_from_slice(&x[src][range.clone()]);
            }
            total += primary_metric(model, &shuffled, labels).unwrap_or(base) - base;
        }
        for (row, orig) in shuffled.iter_mut().zip(x) {
            row[range.clone()].copy_from_slice(&orig[range.clone()]);
        }
        out.push(total / IMPORTANCE_REPEATS as f64);
    }
    Ok(out)
}

fn restrict(bp: &StrategyBlueprint, keep: &[usize]) -> StrategyBlueprint {
    let mut out = bp.clone();
    out.feature_config = keep.iter().map(|&i| bp.feature_config[i].clone()).collect();
    out
}

/// Input columns kept when only the features at `keep` remain; trailing
/// slots past the feature config (the ranking position) always stay.
fn kept_columns(bp: &StrategyBlueprint, keep: &[usize], width: usize) -> Vec<usize> {
    let ranges = slot_ranges(&bp.feature_config);
    let mut cols: Vec<usize> = keep.iter().flat_map(|&i| ranges[i].clone()).collect();
    cols.extend(ranges.last().map_or(0, |r| r.end)..width);
    cols
}

fn pick(x: &[Vec<f64>], cols: &[usize]) -> Vec<Vec<f64>> {
    x.iter().map(|row| cols.iter().map(|&c| row[c]).collect()).collect()
}

fn project(ds: &Dataset, bp: &StrategyBlueprint, keep: &[usize]) -> Dataset {
    let cols = kept_columns(bp, keep, ds.slot_names.len());
    Dataset {
        slot_names: cols.iter().map(|&c| ds.slot_names[c].clone()).collect(),
        x: pick(&ds.x, &cols),
        ..ds.clone()
    }
}

fn relative_change(after: f64, before: f64) -> f64 {
    if before.abs() < 1e-12 {
        after - before
    } else {
        (after - before) / before.abs()
    }
}

fn fit_metric(bp: &StrategyBlueprint, ds: &Dataset) -> Result<(Model, f64)> {
    let (model, _) = train(bp, ds)?;
    let (hx, hl) = holdout_part(ds);
    let m = primary_metric(&model, &hx, &hl).ok_or_else(|| Error::InsufficientData("no labelled holdout rows".into()))?;
    Ok((model, m))
}

/// Runs reaping rounds for `bp` over `ds`. Features the policy reads are
/// never removed. A round is accepted when the holdout metric degrades by
/// at most `tolerance` relative to both the previous round and the
/// unreduced model.
pub fn reap_dataset(bp: &StrategyBlueprint, ds: &Dataset, params: &ReapParams) -> Result<ReapOutcome> {
    if !(0.0..=1.0).contains(&params.step_fraction) || params.tolerance < 0.0 {
        return Err(Error::invalid("step_fraction must lie in [0, 1] and tolerance must be non-negative"));
    }
    if ds.holdout_count() == 0 {
        return Err(Error::InsufficientData("no validation rows".into()));
    }
    let pinned: HashSet<String> = parse_policy(&bp.policy_config.dsl_source)?.features.into_iter().collect();
    let (mut model, original) = fit_metric(bp, ds)?;
    let mut keep: Vec<usize> = (0..bp.feature_config.len()).collect();
    let mut current = original;
    let mut rounds = Vec::new();
    let (hx_full, hl) = holdout_part(ds);

    while rounds.len() < params.max_rounds && params.step_fraction > 0.0 {
        let cur_bp = restrict(bp, &keep);
        let hx = pick(&hx_full, &kept_columns(bp, &keep, ds.slot_names.len()));
        let scores = importance(&model, &hx, &hl, &slot_ranges(&cur_bp.feature_config), mix64(params.seed ^ rounds.len() as u64))?;
        let mut order: Vec<usize> = (0..keep.len())
            .filter(|&j| !cur_bp.feature_config[j].slot_names().iter().any(|s| pinned.contains(s)))
            .collect();
        order.sort_by(|a, b| scores[*a].total_cmp(&scores[*b]).then(a.cmp(b)));
        let want = (params.step_fraction * keep.len() as f64).ceil() as usize;
        let n = want.min(order.len()).min(keep.len().saturating_sub(1));
        if n == 0 {
            break;
        }
        let drop: HashSet<usize> = order[..n].iter().copied().collect();
        let next: Vec<usize> = (0..keep.len()).filter(|j| !drop.contains(j)).map(|j| keep[j]).collect();
        let (next_model, after) = fit_metric(&restrict(bp, &next), &project(ds, bp, &next))?;
        let accepted = relative_change(after, current) <= params.tolerance
            && relative_change(after, original) <= params.tolerance;
        let mut removed: Vec<String> = order[..n].iter().map(|&j| feature_key(&cur_bp.feature_config[j])).collect();
        removed.sort();
        rounds.push(ReapRound { removed, metric_before: current, metric_after: after, accepted });
        if !accepted {
            break;
        }
        keep = next;
        model = next_model;
        current = after;
    }
    Ok(ReapOutcome {
        rounds,
        kept: keep.iter().map(|&i| bp.feature_config[i].clone()).collect(),
        original_metric: original,
        final_metric: current,
    })
}

/// Reaps the live blueprint of `usecase` on its current training data. An
/// accepted reduction is stored as a new draft version and its model is
/// published as a canary.
pub fn reap(platform: &Platform, usecase: &str, params: &ReapParams) -> Result<(ReapReport, Option<(Model, TrainReport)>)> {
    let bp = platform
        .blueprints
        .production(usecase)?
        .ok_or_else(|| Error::State(format!("usecase `{usecase}` has no live version")))?;
    if platform.registry.production(usecase).is_none() {
        return Err(Error::State(format!("usecase `{usecase}` has no production model")));
    }
    let rows = platform.training_rows(usecase);
    let lookup = |v: u32| platform.blueprints.get(usecase, v).ok().map(Arc::new);
    let ds = build_dataset(&bp, &rows, &lookup)?;
    let outcome = reap_dataset(&bp, &ds, params)?;

    let slots_before = crate::features::slot_count(&bp.feature_config);
    let slots_after = crate::features::slot_count(&outcome.kept);
    let mut report = ReapReport {
        usecase: usecase.to_string(),
        original_version: bp.version,
        final_version: None,
        canary_id: None,
        rounds: outcome.rounds,
        original_metric: outcome.original_metric,
        final_metric: outcome.final_metric,
        features_before: bp.feature_config.len(),
        features_after: outcome.kept.len(),
        slots_before,
        slots_after,
        cost_delta: slots_after as i64 - slots_before as i64,
        kept: outcome.kept.iter().map(feature_key).collect(),
    };
    if outcome.kept.len() == bp.feature_config.len() {
        return Ok((report, None));
    }
    let mut draft = bp.to_draft();
    draft.feature_config = outcome.kept;
    let fs = &platform.features;
    let reduced = platform.blueprints.create_version(usecase, draft, &|g| fs.has_group(g), platform.now())?;
    let (model, train_report) = platform.train(usecase, Some(reduced.version))?;
    report.final_version = Some(reduced.version);
    report.canary_id = Some(platform.publish(model.clone(), &train_report)?);
    Ok((report, Some((model, train_report))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blueprint::{BlueprintStatus, LabelSpec, ModelConfig, ModelFamily, PolicyConfig, TaskKind};
    use crate::space::DecisionSpace;
    use rand::Rng;

    fn blueprint(n: usize, dsl: &str) -> StrategyBlueprint {
        StrategyBlueprint {
            usecase_id: "u".into(),
            version: 1,
            decision_space: DecisionSpace::Score,
            feature_config: (0..n).map(|i| FeatureRef::new("context", &format!("f{i}"))).collect(),
            label_config: vec![LabelSpec::real("y", crate::blueprint::Aggregation::Sum, crate::blueprint::DelayClass::Online)],
            model_config: ModelConfig {
                family: ModelFamily::Gbdt,
                task: TaskKind::Regression,
                num_trees: 60,
                max_depth: 3,
                learning_rate: 0.1,
                holdout_fraction: 0.25,
            },
            policy_config: PolicyConfig::new(dsl),
            ttl_ms: 1000,
            created_at: 0,
            status: BlueprintStatus::Live,
        }
    }

    fn synth(n: usize, informative: usize, noise: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for _ in 0..n {
            let row: Vec<f64> = (0..informative + noise).map(|_| rng.random_range(-1.0..1.0)).collect();
            y.push(row[..informative].iter().sum::<f64>() + rng.random_range(-0.1..0.1));
            x.push(row);
        }
        Dataset::from_xy(x, &y, crate::blueprint::LabelKind::Real, 0.25)
    }

    #[test]
    fn noise_feature_scores_near_zero() {
        let bp = blueprint(4, "score pred(\"y\");");
        let ds = synth(5_000, 1, 3, 1);
        let (model, _) = fit_metric(&bp, &ds).unwrap();
        let (hx, hl) = holdout_part(&ds);
        let s = importance(&model, &hx, &hl, &slot_ranges(&bp.feature_config), 9).unwrap();
        assert!(s[0] > s[1] && s[0] > s[2] && s[0] > s[3], "{s:?}");
        for v in &s[1..] {
            assert!(v.abs() < 0.01, "{s:?}");
        }
        assert_eq!(s, importance(&model, &hx, &hl, &slot_ranges(&bp.feature_config), 9).unwrap());
    }

    #[test]
    fn constant_feature_scores_zero() {
        let bp = blueprint(2, "score pred(\"y\");");
        let mut ds = synth(800, 1, 1, 2);
        for r in &mut ds.x {
            r[1] = 3.0;
        }
        let (model, _) = fit_metric(&bp, &ds).unwrap();
        let (hx, hl) = holdout_part(&ds);
        assert_eq!(importance(&model, &hx, &hl, &slot_ranges(&bp.feature_config), 0).unwrap()[1], 0.0);
    }

    #[test]
    fn zero_step_is_identity() {
        let bp = blueprint(3, "score pred(\"y\");");
        let ds = synth(400, 2, 1, 3);
        let out = reap_dataset(&bp, &ds, &ReapParams { step_fraction: 0.0, ..ReapParams::default() }).unwrap();
        assert!(out.rounds.is_empty());
        assert_eq!(out.kept, bp.feature_config);
    }

    #[test]
    fn duplicates_removed_at_zero_tolerance() {
        let bp = blueprint(6, "score pred(\"y\");");
        let mut ds = synth(2_000, 3, 0, 4);
        for r in &mut ds.x {
            let dup = r.clone();
            r.extend(dup);
        }
        ds.slot_names = (0..6).map(|i| format!("f{i}")).collect();
        let out = reap_dataset(&bp, &ds, &ReapParams { step_fraction: 0.5, tolerance: 0.0, max_rounds: 1, seed: 0 }).unwrap();
        assert!(out.rounds[0].accepted, "{:?}", out.rounds);
        let kept: Vec<&str> = out.kept.iter().map(|f| f.name.as_str()).collect();
        assert_eq!(kept, ["f0", "f1", "f2"]);
    }

    #[test]
    fn pinned_features_survive() {
        let bp = blueprint(4, "score pred(\"y\") + feature(\"f3\") * 0;");
        let ds = synth(1_000, 1, 3, 5);
        let out = reap_dataset(&bp, &ds, &ReapParams { step_fraction: 0.5, tolerance: 0.05, max_rounds: 3, seed: 0 }).unwrap();
        assert!(out.kept.iter().any(|f| f.name == "f3"));
        assert!(out.kept.iter().any(|f| f.name == "f0"));
        let mut prev = bp.feature_config.len();
        for r in out.rounds.iter().filter(|r| r.accepted) {
            assert!(r.removed.len() <= prev);
            prev -= r.removed.len();
        }
    }

    #[test]
    fn noise_reaped_before_signal() {
        let bp = blueprint(40, "score pred(\"y\");");
        let ds = synth(4_000, 20, 20, 6);
        let out = reap_dataset(&bp, &ds, &ReapParams::default()).unwrap();
        let signal = out.kept.iter().filter(|f| f.name[1..].parse::<usize>().unwrap() < 20).count();
        let noise_left = out.kept.len() - signal;
        assert!(20 - noise_left >= 15 && signal >= 19, "{:?}", out.rounds);
        assert!(relative_change(out.final_metric, out.original_metric) <= 0.01);
    }
}
