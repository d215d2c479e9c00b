//! Evaluation metrics. Lower is better for everything except AUC and
//! accuracy.

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn logloss(p: &[f64], y: &[f64]) -> f64 {
    const EPS: f64 = 1e-15;
    let n = y.len().max(1) as f64;
    p.iter()
        .zip(y)
        .map(|(p, y)| {
            let p = p.clamp(EPS, 1.0 - EPS);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / n
}

pub fn mse(p: &[f64], y: &[f64]) -> f64 {
    let n = y.len().max(1) as f64;
    p.iter().zip(y).map(|(p, y)| (p - y).powi(2)).sum::<f64>() / n
}

pub fn accuracy(p: &[f64], y: &[f64]) -> f64 {
    let n = y.len().max(1) as f64;
    p.iter().zip(y).filter(|(p, y)| (**p >= 0.5) == (**y >= 0.5)).count() as f64 / n
}

/// Rank-based AUC with tied scores sharing their average rank. Returns 0.5
/// when only one class is present.
pub fn auc(p: &[f64], y: &[f64]) -> f64 {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|a, b| p[*a].total_cmp(&p[*b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && p[idx[j + 1]] == p[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in &idx[i..=j] {
            if y[*k] >= 0.5 {
                rank_sum += avg;
            }
        }
        i = j + 1;
    }
    let pos = y.iter().filter(|v| **v >= 0.5).count() as f64;
    let neg = y.len() as f64 - pos;
    if pos == 0.0 || neg == 0.0 {
        return 0.5;
    }
    (rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_against_pair_count() {
        let p = [0.1, 0.4, 0.35, 0.8, 0.4, 0.9];
        let y = [0.0, 0.0, 1.0, 1.0, 1.0, 0.0];
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for i in 0..6 {
            for j in 0..6 {
                if y[i] == 1.0 && y[j] == 0.0 {
                    pairs += 1.0;
                    wins += if p[i] > p[j] { 1.0 } else if p[i] == p[j] { 0.5 } else { 0.0 };
                }
            }
        }
        assert!((auc(&p, &y) - wins / pairs).abs() < 1e-12);
        assert_eq!(auc(&[0.3, 0.7], &[1.0, 1.0]), 0.5);
    }

    #[test]
    fn logloss_and_mse() {
        assert!((logloss(&[0.5], &[1.0]) - 2f64.ln()).abs() < 1e-12);
        assert!(logloss(&[1.0], &[0.0]).is_finite());
        assert_eq!(mse(&[1.0, 3.0], &[2.0, 2.0]), 1.0);
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }
}
