//! Population stability of features and predictions between two windows.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PSI_BUCKETS: usize = 10;
pub const PSI_ALERT: f64 = 0.2;
const SMOOTHING: f64 = 1e-4;

/// Model inputs and outputs observed over one time window.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Window {
    pub start: i64,
    pub end: i64,
    /// Row-major, NaN where missing.
    pub features: Vec<Vec<f64>>,
    pub predictions: Vec<BTreeMap<String, f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureDrift {
    pub slot: String,
    pub psi: f64,
    pub missing_rate_baseline: f64,
    pub missing_rate_current: f64,
    pub alert: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionDrift {
    pub name: String,
    pub mean_delta: f64,
    pub std_delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub baseline: (i64, i64),
    pub current: (i64, i64),
    pub features: Vec<FeatureDrift>,
    pub predictions: Vec<PredictionDrift>,
    pub alert: bool,
}

impl DriftReport {
    pub fn alerts(&self) -> Vec<&str> {
        self.features.iter().filter(|f| f.alert).map(|f| f.slot.as_str()).collect()
    }
}

/// Bucket edges at the baseline's deciles.
fn edges(baseline: &[f64]) -> Vec<f64> {
    let mut v = baseline.to_vec();
    v.sort_by(f64::total_cmp);
    let mut e: Vec<f64> = (1..PSI_BUCKETS).map(|k| v[(k * v.len()) / PSI_BUCKETS]).collect();
    e.dedup();
    e
}

fn shares(values: &[f64], edges: &[f64]) -> Vec<f64> {
    let mut counts = vec![0.0; edges.len() + 1];
    for v in values {
        counts[edges.partition_point(|e| e <= v)] += 1.0;
    }
    let n = values.len().max(1) as f64;
    counts.iter().map(|c| (c / n).max(SMOOTHING)).collect()
}

/// PSI of `current` against `baseline`, bucketed on baseline deciles.
pub fn psi(baseline: &[f64], current: &[f64]) -> f64 {
    if baseline.is_empty() || current.is_empty() {
        return 0.0;
    }
    let e = edges(baseline);
    let b = shares(baseline, &e);
    let c = shares(current, &e);
    b.iter().zip(&c).map(|(b, c)| (c - b) * (c / b).ln()).sum()
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
}

pub fn check_drift(slots: &[String], baseline: &Window, current: &Window) -> Result<DriftReport> {
    if baseline.features.is_empty() || current.features.is_empty() {
        return Err(Error::InsufficientData("drift check needs rows in both windows".into()));
    }
    let column = |w: &Window, j: usize| -> (Vec<f64>, f64) {
        let all: Vec<f64> = w.features.iter().map(|r| r.get(j).copied().unwrap_or(f64::NAN)).collect();
        let present: Vec<f64> = all.iter().copied().filter(|v| !v.is_nan()).collect();
        let missing = 1.0 - present.len() as f64 / all.len() as f64;
        (present, missing)
    };
    let features: Vec<FeatureDrift> = slots
        .iter()
        .enumerate()
        .map(|(j, slot)| {
            let (b, mb) = column(baseline, j);
            let (c, mc) = column(current, j);
            let psi = psi(&b, &c);
            FeatureDrift { slot: slot.clone(), psi, missing_rate_baseline: mb, missing_rate_current: mc, alert: psi > PSI_ALERT }
        })
        .collect();
    let mut names: Vec<&String> = baseline.predictions.iter().chain(&current.predictions).flat_map(|p| p.keys()).collect();
    names.sort();
    names.dedup();
    let predictions = names
        .into_iter()
        .map(|name| {
            let pick = |w: &Window| w.predictions.iter().filter_map(|p| p.get(name).copied()).collect::<Vec<_>>();
            let (mb, sb) = mean_std(&pick(baseline));
            let (mc, sc) = mean_std(&pick(current));
            PredictionDrift { name: name.clone(), mean_delta: mc - mb, std_delta: sc - sb }
        })
        .collect();
    let alert = features.iter().any(|f| f.alert);
    Ok(DriftReport {
        baseline: (baseline.start, baseline.end),
        current: (current.start, current.end),
        features,
        predictions,
        alert,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn normal(n: usize, mu: f64, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Normal::new(mu, 1.0).unwrap();
        (0..n).map(|_| d.sample(&mut rng)).collect()
    }

    #[test]
    fn identical_windows_zero() {
        let v = normal(1_000, 0.0, 1);
        assert_eq!(psi(&v, &v), 0.0);
    }

    #[test]
    fn two_sigma_shift_alerts() {
        let b = normal(5_000, 0.0, 1);
        let c = normal(5_000, 2.0, 2);
        assert!(psi(&b, &c) > PSI_ALERT);
        assert!(psi(&b, &normal(5_000, 0.0, 3)) < 0.1);
    }

    #[test]
    fn report_fields() {
        let w = |mu, seed| Window {
            start: 0,
            end: 1,
            features: normal(2_000, mu, seed).into_iter().map(|v| vec![v, f64::NAN]).collect(),
            predictions: vec![BTreeMap::from([("p".to_string(), mu)])],
        };
        let r = check_drift(&["a".into(), "b".into()], &w(0.0, 1), &w(2.0, 2)).unwrap();
        assert!(r.alert);
        assert_eq!(r.alerts(), vec!["a"]);
        assert_eq!(r.features[1].missing_rate_current, 1.0);
        assert_eq!(r.predictions[0].mean_delta, 2.0);
        assert!(check_drift(&["a".into()], &Window::default(), &w(0.0, 1)).is_err());
    }

    proptest! {
        #[test]
        fn psi_nonnegative(b in prop::collection::vec(-5.0f64..5.0, 1..200), c in prop::collection::vec(-5.0f64..5.0, 1..200)) {
            prop_assert!(psi(&b, &c) >= 0.0);
        }
    }
}
