use serde::{Deserialize, Serialize};

use super::OutcomeLog;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm_id: String,
    pub n: usize,
    pub mean: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AteResult {
    /// mean(a) - mean(b)
    pub estimate: f64,
    /// Welch standard error.
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub arm_a: ArmSummary,
    pub arm_b: ArmSummary,
}

fn summarize(log: &OutcomeLog, arm: &str) -> Result<ArmSummary> {
    let ys: Vec<f64> = log.rows.iter().filter(|r| r.arm_id == arm).map(|r| r.y).collect();
    if ys.len() < 2 {
        return Err(Error::InsufficientData(format!("arm `{arm}` has {} outcomes, need 2", ys.len())));
    }
    let n = ys.len() as f64;
    let mean = ys.iter().sum::<f64>() / n;
    let variance = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(ArmSummary { arm_id: arm.to_string(), n: ys.len(), mean, variance })
}

/// Difference in means with a Welch standard error and a 95% normal CI.
pub fn estimate_ate(log: &OutcomeLog, arm_a: &str, arm_b: &str) -> Result<AteResult> {
    let a = summarize(log, arm_a)?;
    let b = summarize(log, arm_b)?;
    let estimate = a.mean - b.mean;
    let se = (a.variance / a.n as f64 + b.variance / b.n as f64).sqrt();
    Ok(AteResult { estimate, se, ci_low: estimate - 1.96 * se, ci_high: estimate + 1.96 * se, arm_a: a, arm_b: b })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::OutcomeRow;

    fn log(a: &[f64], b: &[f64]) -> OutcomeLog {
        let row = |arm: &str, i: usize, y: f64| OutcomeRow {
            unit_id: format!("{arm}{i}"),
            arm_id: arm.into(),
            x: vec![],
            y,
            randomized: true,
        };
        OutcomeLog {
            rows: a.iter().enumerate().map(|(i, y)| row("a", i, *y))
                .chain(b.iter().enumerate().map(|(i, y)| row("b", i, *y)))
                .collect(),
        }
    }

    #[test]
    fn degenerate_variance() {
        let r = estimate_ate(&log(&[1.0; 5], &[0.0; 5]), "a", "b").unwrap();
        assert_eq!(r.estimate, 1.0);
        assert_eq!(r.se, 0.0);
    }

    #[test]
    fn antisymmetric() {
        let l = log(&[1.0, 2.0, 4.0], &[0.5, 0.0, 3.0, 1.0]);
        let ab = estimate_ate(&l, "a", "b").unwrap();
        let ba = estimate_ate(&l, "b", "a").unwrap();
        assert_eq!(ab.estimate, -ba.estimate);
        assert_eq!(ab.se, ba.se);
        assert!(ab.ci_low <= ab.estimate && ab.estimate <= ab.ci_high);
    }

    #[test]
    fn empty_arm_errors() {
        assert!(estimate_ate(&log(&[1.0], &[0.0, 1.0]), "a", "b").is_err());
        assert!(estimate_ate(&log(&[1.0, 2.0], &[0.0, 1.0]), "a", "zzz").is_err());
    }
}
