//! Meta-learners for conditional average treatment effects.

use serde::{Deserialize, Serialize};

use super::OutcomeLog;
use crate::blueprint::{ModelConfig, ModelFamily};
use crate::error::{Error, Result};
use crate::trainer::{HeadModel, Loss};

pub const MIN_ARM_ROWS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LearnerKind {
    S,
    T,
    X,
}

impl std::str::FromStr for LearnerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "S" => Ok(LearnerKind::S),
            "T" => Ok(LearnerKind::T),
            "X" => Ok(LearnerKind::X),
            _ => Err(Error::invalid(format!("unknown learner `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum CateParts {
    S { mu: HeadModel },
    T { mu0: HeadModel, mu1: HeadModel },
    X { mu0: HeadModel, mu1: HeadModel, tau0: HeadModel, tau1: HeadModel, propensity: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CateModel {
    pub treated_arm: String,
    pub control_arm: String,
    pub dim: usize,
    pub n_treated: usize,
    pub n_control: usize,
    pub parts: CateParts,
}

/// Base-learner settings used when no explicit config is given: shallow
/// trees with a small step keep the imputed-effect fits from chasing
/// outcome noise.
pub fn default_base_config() -> ModelConfig {
    ModelConfig { family: ModelFamily::Gbdt, num_trees: 100, max_depth: 2, learning_rate: 0.05, ..ModelConfig::default() }
}

fn regress(cfg: &ModelConfig, x: &[Vec<f64>], y: &[f64]) -> HeadModel {
    HeadModel::fit(cfg.family, cfg, x, y, Loss::Squared)
}

fn with_t(x: &[f64], t: f64) -> Vec<f64> {
    let mut v = x.to_vec();
    v.push(t);
    v
}

/// Fits a CATE model of `treated` vs `control` from an outcome log.
pub fn fit_hte(kind: LearnerKind, log: &OutcomeLog, treated: &str, control: &str, cfg: &ModelConfig) -> Result<CateModel> {
    let split = |arm: &str| -> (Vec<Vec<f64>>, Vec<f64>) {
        log.rows.iter().filter(|r| r.arm_id == arm).map(|r| (r.x.clone(), r.y)).unzip()
    };
    let (x1, y1) = split(treated);
    let (x0, y0) = split(control);
    for (arm, n) in [(treated, y1.len()), (control, y0.len())] {
        if n < MIN_ARM_ROWS {
            return Err(Error::InsufficientData(format!("arm `{arm}` has {n} rows, need {MIN_ARM_ROWS}")));
        }
    }
    let dim = x1[0].len();
    if x1.iter().chain(&x0).any(|r| r.len() != dim) {
        return Err(Error::invalid("covariate dimension varies across rows"));
    }
    let parts = match kind {
        LearnerKind::S => {
            let mut x: Vec<Vec<f64>> = x1.iter().map(|r| with_t(r, 1.0)).collect();
            x.extend(x0.iter().map(|r| with_t(r, 0.0)));
            let y: Vec<f64> = y1.iter().chain(&y0).copied().collect();
            CateParts::S { mu: regress(cfg, &x, &y) }
        }
        LearnerKind::T => CateParts::T { mu0: regress(cfg, &x0, &y0), mu1: regress(cfg, &x1, &y1) },
        LearnerKind::X => {
            let mu0 = regress(cfg, &x0, &y0);
            let mu1 = regress(cfg, &x1, &y1);
            let d1: Vec<f64> = x1.iter().zip(&y1).map(|(x, y)| y - mu0.predict(x)).collect();
            let d0: Vec<f64> = x0.iter().zip(&y0).map(|(x, y)| mu1.predict(x) - y).collect();
            let tau1 = regress(cfg, &x1, &d1);
            let tau0 = regress(cfg, &x0, &d0);
            let propensity = y1.len() as f64 / (y1.len() + y0.len()) as f64;
            CateParts::X { mu0, mu1, tau0, tau1, propensity }
        }
    };
    Ok(CateModel {
        treated_arm: treated.to_string(),
        control_arm: control.to_string(),
        dim,
        n_treated: y1.len(),
        n_control: y0.len(),
        parts,
    })
}

impl CateModel {
    pub fn kind(&self) -> LearnerKind {
        match self.parts {
            CateParts::S { .. } => LearnerKind::S,
            CateParts::T { .. } => LearnerKind::T,
            CateParts::X { .. } => LearnerKind::X,
        }
    }

    pub fn predict_cate(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim {
            return Err(Error::invalid(format!("expected {} covariates, got {}", self.dim, x.len())));
        }
        Ok(match &self.parts {
            CateParts::S { mu } => mu.predict(&with_t(x, 1.0)) - mu.predict(&with_t(x, 0.0)),
            CateParts::T { mu0, mu1 } => mu1.predict(x) - mu0.predict(x),
            CateParts::X { tau0, tau1, propensity, .. } => {
                propensity * tau0.predict(x) + (1.0 - propensity) * tau1.predict(x)
            }
        })
    }
}

/// Arm with the largest predicted lift over control; control (lift 0) wins
/// ties.
pub fn hte_assign(models: &[CateModel], control: &str, x: &[f64]) -> Result<String> {
    let mut best = (control.to_string(), 0.0);
    for m in models {
        if m.control_arm != control {
            return Err(Error::invalid(format!("model for `{}` was fit against `{}`", m.treated_arm, m.control_arm)));
        }
        let lift = m.predict_cate(x)?;
        if lift > best.1 {
            best = (m.treated_arm.clone(), lift);
        }
    }
    Ok(best.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::OutcomeRow;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn synth(n: usize, seed: u64, tau: impl Fn(f64) -> f64) -> OutcomeLog {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.5).unwrap();
        let rows = (0..n)
            .map(|i| {
                let x: f64 = rng.random();
                let t = rng.random_bool(0.5);
                let y = x + if t { tau(x) } else { 0.0 } + noise.sample(&mut rng);
                OutcomeRow {
                    unit_id: i.to_string(),
                    arm_id: if t { "B" } else { "A" }.into(),
                    x: vec![x],
                    y,
                    randomized: true,
                }
            })
            .collect();
        OutcomeLog { rows }
    }

    #[test]
    fn constant_effect_all_learners() {
        let log = synth(5_000, 1, |_| 0.5);
        for kind in [LearnerKind::S, LearnerKind::T, LearnerKind::X] {
            let m = fit_hte(kind, &log, "B", "A", &default_base_config()).unwrap();
            for x in [0.1, 0.5, 0.9] {
                let t = m.predict_cate(&[x]).unwrap();
                assert!((t - 0.5).abs() < 0.1, "{kind:?} at {x}: {t}");
            }
        }
    }

    #[test]
    fn roundtrip_and_dimension_check() {
        let log = synth(400, 2, |_| 0.0);
        let m = fit_hte(LearnerKind::X, &log, "B", "A", &default_base_config()).unwrap();
        let back: CateModel = serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
        assert_eq!(back.predict_cate(&[0.3]).unwrap(), m.predict_cate(&[0.3]).unwrap());
        assert!(m.predict_cate(&[0.3, 0.1]).is_err());
    }

    #[test]
    fn too_few_rows() {
        let log = synth(60, 3, |_| 0.0);
        assert!(fit_hte(LearnerKind::T, &log, "B", "A", &default_base_config()).is_err());
        assert!(fit_hte(LearnerKind::T, &log, "B", "nobody", &default_base_config()).is_err());
    }

    fn constant_lift(arm: &str, lift: f64) -> CateModel {
        let c = |v| HeadModel::Gbdt(crate::trainer::GbdtModel::constant(Loss::Squared, v, 1));
        CateModel {
            treated_arm: arm.into(),
            control_arm: "A".into(),
            dim: 1,
            n_treated: 0,
            n_control: 0,
            parts: CateParts::T { mu0: c(0.0), mu1: c(lift) },
        }
    }

    #[test]
    fn assign_argmax_with_control_ties() {
        assert_eq!(hte_assign(&[constant_lift("B", 0.3)], "A", &[0.5]).unwrap(), "B");
        assert_eq!(hte_assign(&[constant_lift("B", -0.1)], "A", &[0.5]).unwrap(), "A");
        assert_eq!(hte_assign(&[constant_lift("B", 0.0)], "A", &[0.5]).unwrap(), "A");
        assert_eq!(hte_assign(&[constant_lift("B", 0.1), constant_lift("C", 0.2)], "A", &[0.5]).unwrap(), "C");
        assert_eq!(hte_assign(&[], "A", &[0.5]).unwrap(), "A");
    }
}
