//! Bayesian optimization of tunable blueprint parameters, with trials run
//! as experiments against the production blueprint.

pub mod gp;

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;

use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiments::{Arm, ArmTarget, ExperimentSpec};
use crate::hashing::mix64;
use crate::service::Platform;

pub use gp::Gp;

pub const MAX_DIMS: usize = 8;
pub const DEFAULT_INIT_TRIALS: usize = 5;
pub const EI_CANDIDATES: usize = 2_048;
const NEIGHBORS: usize = 32;
const PRIMES: [u64; MAX_DIMS] = [2, 3, 5, 7, 11, 13, 17, 19];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamDim {
    pub name: String,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpace {
    pub dims: Vec<ParamDim>,
}

impl ParamSpace {
    pub fn new(dims: &[(&str, f64, f64)]) -> Self {
        Self {
            dims: dims.iter().map(|(n, l, u)| ParamDim { name: n.to_string(), lower: *l, upper: *u }).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut p = Vec::new();
        if self.dims.is_empty() || self.dims.len() > MAX_DIMS {
            p.push(format!("space needs 1 to {MAX_DIMS} dims, has {}", self.dims.len()));
        }
        let mut seen = std::collections::HashSet::new();
        for d in &self.dims {
            if !(d.lower.is_finite() && d.upper.is_finite() && d.lower < d.upper) {
                p.push(format!("`{}` bounds [{}, {}] are invalid", d.name, d.lower, d.upper));
            }
            if !seen.insert(&d.name) {
                p.push(format!("`{}` listed twice", d.name));
            }
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(p))
        }
    }

    pub fn to_unit(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.dims).map(|(v, d)| (v - d.lower) / (d.upper - d.lower)).collect()
    }

    pub fn from_unit(&self, u: &[f64]) -> Vec<f64> {
        u.iter().zip(&self.dims).map(|(v, d)| d.lower + v.clamp(0.0, 1.0) * (d.upper - d.lower)).collect()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dims.len() && x.iter().zip(&self.dims).all(|(v, d)| *v >= d.lower && *v <= d.upper)
    }

    pub fn named(&self, x: &[f64]) -> BTreeMap<String, f64> {
        self.dims.iter().zip(x).map(|(d, v)| (d.name.clone(), *v)).collect()
    }
}

/// One evaluated point: its objective value and standard error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub x: Vec<f64>,
    pub value: f64,
    pub se: f64,
}

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

/// The `index`-th Halton point in the unit cube, shifted by a seed-derived
/// rotation modulo 1.
pub fn scrambled_halton(index: usize, dims: usize, seed: u64) -> Vec<f64> {
    (0..dims)
        .map(|k| {
            let shift = (mix64(seed ^ (k as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)) >> 11) as f64
                / (1u64 << 53) as f64;
            (radical_inverse(index as u64 + 1, PRIMES[k]) + shift).fract()
        })
        .collect()
}

/// Next point to evaluate: low-discrepancy points for the first
/// `DEFAULT_INIT_TRIALS`, then the EI maximizer over seeded candidates and
/// perturbations of the best observations.
pub fn suggest(history: &[Observation], space: &ParamSpace, seed: u64) -> Result<Vec<f64>> {
    space.validate()?;
    let d = space.dims.len();
    if history.len() < DEFAULT_INIT_TRIALS {
        return Ok(space.from_unit(&scrambled_halton(history.len(), d, seed)));
    }
    let xs: Vec<Vec<f64>> = history.iter().map(|o| space.to_unit(&o.x)).collect();
    let ys: Vec<f64> = history.iter().map(|o| o.value).collect();
    let noise: Vec<f64> = history.iter().map(|o| o.se * o.se).collect();
    let gp = Gp::fit(&xs, &ys, &noise)?;
    let best = gp.incumbent();

    let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed ^ history.len() as u64));
    let mut candidates: Vec<Vec<f64>> = (0..EI_CANDIDATES).map(|_| (0..d).map(|_| rng.random::<f64>()).collect()).collect();
    let mut ranked: Vec<usize> = (0..history.len()).collect();
    ranked.sort_by(|a, b| ys[*b].total_cmp(&ys[*a]));
    let jiggle = Normal::new(0.0, 0.05).expect("valid sd");
    for &i in ranked.iter().take(5) {
        for _ in 0..NEIGHBORS {
            candidates.push(xs[i].iter().map(|v| (v + jiggle.sample(&mut rng)).clamp(0.0, 1.0)).collect());
        }
    }
    let mut pick = &candidates[0];
    let mut pick_ei = f64::NEG_INFINITY;
    for c in &candidates {
        let ei = gp.expected_improvement(c, best);
        if ei > pick_ei {
            pick_ei = ei;
            pick = c;
        }
    }
    Ok(space.from_unit(pick))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

/// Weighted sum of metric means (maximize). Errors if a weighted metric is
/// missing.
pub fn scalarize(metrics: &BTreeMap<String, MetricSummary>, weights: &BTreeMap<String, f64>) -> Result<MetricSummary> {
    let mut mean = 0.0;
    let mut var = 0.0;
    let mut n = usize::MAX;
    for (name, w) in weights {
        let m = metrics.get(name).ok_or_else(|| Error::not_found("metric", name))?;
        mean += w * m.mean;
        var += (w * m.se).powi(2);
        n = n.min(m.n);
    }
    Ok(MetricSummary { mean, se: var.sqrt(), n: if n == usize::MAX { 0 } else { n } })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialStatus {
    Running,
    Completed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub trial_id: usize,
    pub usecase: String,
    pub params: BTreeMap<String, f64>,
    pub blueprint_version: u32,
    pub control_version: u32,
    pub experiment_id: String,
    pub metrics: BTreeMap<String, MetricSummary>,
    pub status: TrialStatus,
}

/// Runs trials as two-arm experiments (production vs. a clone with new
/// parameter values) and keeps the ledger of completed trials.
pub struct TrialRunner {
    cap: usize,
    next_id: Mutex<usize>,
    running: Mutex<BTreeMap<usize, Trial>>,
    completed: Mutex<Vec<Trial>>,
    ledger: Option<PathBuf>,
}

impl TrialRunner {
    pub fn new(cap: usize, ledger: Option<PathBuf>) -> Self {
        Self {
            cap,
            next_id: Mutex::new(0),
            running: Mutex::new(BTreeMap::new()),
            completed: Mutex::new(Vec::new()),
            ledger,
        }
    }

    pub fn completed(&self) -> Vec<Trial> {
        self.completed.lock().clone()
    }

    /// Creates the trial blueprint and its experiment. `metric` is the
    /// experiment outcome expression.
    pub fn run_trial(&self, platform: &Platform, usecase: &str, space: &ParamSpace, x: &[f64], metric: &str) -> Result<Trial> {
        space.validate()?;
        if !space.contains(x) {
            return Err(Error::invalid(format!("params {x:?} outside the space")));
        }
        let mut running = self.running.lock();
        if running.len() >= self.cap {
            return Err(Error::Capacity(format!("{} trial(s) already running", running.len())));
        }
        let prod = platform
            .blueprints
            .production(usecase)?
            .ok_or_else(|| Error::State(format!("usecase `{usecase}` has no live version")))?;
        let mut draft = prod.to_draft();
        let params = space.named(x);
        for (k, v) in &params {
            if !prod.policy_config.tunable.contains_key(k) {
                return Err(Error::invalid(format!("`{k}` is not tunable in {usecase} v{}", prod.version)));
            }
            draft.policy_config.parameters.insert(k.clone(), *v);
        }
        let fs = &platform.features;
        let bp = platform.blueprints.create_version(usecase, draft, &|g| fs.has_group(g), platform.now())?;
        let id = {
            let mut n = self.next_id.lock();
            *n += 1;
            *n
        };
        let exp = platform.experiments.create(
            ExperimentSpec {
                experiment_id: Some(format!("{usecase}-trial-{id}-v{}", bp.version)),
                usecase: usecase.to_string(),
                arms: vec![
                    Arm { arm_id: "control".into(), target: ArmTarget::Version(prod.version), proportion: 0.5 },
                    Arm { arm_id: "trial".into(), target: ArmTarget::Version(bp.version), proportion: 0.5 },
                ],
                salt: None,
                control_arm: Some("control".into()),
                metric: metric.to_string(),
                hte_holdout: None,
            },
            platform.now(),
        )?;
        let trial = Trial {
            trial_id: id,
            usecase: usecase.to_string(),
            params,
            blueprint_version: bp.version,
            control_version: prod.version,
            experiment_id: exp.experiment_id.clone(),
            metrics: BTreeMap::new(),
            status: TrialStatus::Running,
        };
        running.insert(id, trial.clone());
        Ok(trial)
    }

    /// Stops the trial's experiment and records the trial arm's mean
    /// outcome (`value`) and its lift over control (`lift`).
    pub fn complete_trial(&self, platform: &Platform, trial_id: usize) -> Result<Trial> {
        let mut trial = self.running.lock().remove(&trial_id).ok_or_else(|| Error::not_found("trial", trial_id.to_string()))?;
        let result = platform.experiments.ate(&trial.experiment_id, Some("trial"));
        platform.experiments.stop(&trial.experiment_id)?;
        let ate = result?;
        trial.metrics.insert(
            "value".into(),
            MetricSummary { mean: ate.arm_a.mean, se: (ate.arm_a.variance / ate.arm_a.n as f64).sqrt(), n: ate.arm_a.n },
        );
        trial.metrics.insert("lift".into(), MetricSummary { mean: ate.estimate, se: ate.se, n: ate.arm_a.n + ate.arm_b.n });
        trial.status = TrialStatus::Completed;
        if let Some(p) = &self.ledger {
            let mut f = OpenOptions::new().create(true).append(true).open(p)?;
            let mut line = serde_json::to_vec(&trial)?;
            line.push(b'\n');
            f.write_all(&line)?;
        }
        self.completed.lock().push(trial.clone());
        Ok(trial)
    }
}
