//! Standardized linear and logistic regression fit by full-batch gradient
//! descent.

use serde::{Deserialize, Serialize};

use super::gbdt::Loss;
use super::metrics::sigmoid;

const ITERATIONS: usize = 500;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub loss: Loss,
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LinearModel {
    pub fn fit(x: &[Vec<f64>], y: &[f64], loss: Loss) -> Self {
        let d = x.first().map_or(0, Vec::len);
        let mut means = vec![0.0; d];
        let mut scales = vec![1.0; d];
        for j in 0..d {
            let vals: Vec<f64> = x.iter().map(|r| r[j]).filter(|v| !v.is_nan()).collect();
            if vals.is_empty() {
                continue;
            }
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64;
            means[j] = m;
            scales[j] = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        }
        let mut model = Self { loss, means, scales, weights: vec![0.0; d], bias: 0.0 };
        if y.is_empty() {
            return model;
        }
        let z: Vec<Vec<f64>> = x.iter().map(|r| model.standardize(r)).collect();
        let n = y.len() as f64;
        // 1/L for the standardized design: ||x||^2 <= d + 1 including the bias.
        let step = match loss {
            Loss::Squared => 1.0 / (d as f64 + 1.0),
            Loss::Logistic => 4.0 / (d as f64 + 1.0),
        };
        model.bias = match loss {
            Loss::Squared => y.iter().sum::<f64>() / n,
            Loss::Logistic => {
                let p = (y.iter().sum::<f64>() / n).clamp(1e-6, 1.0 - 1e-6);
                (p / (1.0 - p)).ln()
            }
        };
        let mut gw = vec![0.0; d];
        for _ in 0..ITERATIONS {
            gw.iter_mut().for_each(|g| *g = 0.0);
            let mut gb = 0.0;
            for (zi, yi) in z.iter().zip(y) {
                let f = model.bias + dot(&model.weights, zi);
                let r = match loss {
                    Loss::Squared => f - yi,
                    Loss::Logistic => sigmoid(f) - yi,
                };
                gb += r;
                for (g, v) in gw.iter_mut().zip(zi) {
                    *g += r * v;
                }
            }
            model.bias -= step * gb / n;
            for (w, g) in model.weights.iter_mut().zip(&gw) {
                *w -= step * g / n;
            }
        }
        model
    }

    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.means.iter().zip(&self.scales))
            .map(|(v, (m, s))| if v.is_nan() { 0.0 } else { (v - m) / s })
            .collect()
    }

    pub fn raw(&self, x: &[f64]) -> f64 {
        self.bias + dot(&self.weights, &self.standardize(x))
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        match self.loss {
            Loss::Squared => self.raw(x),
            Loss::Logistic => sigmoid(self.raw(x)),
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
