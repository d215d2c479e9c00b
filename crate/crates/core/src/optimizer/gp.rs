//! Exact Gaussian-process regression with a squared-exponential kernel and
//! fixed median-heuristic length scales.

use crate::error::{Error, Result};

pub const JITTER: f64 = 1e-8;
/// Posterior variances below this (standardized units) count as zero in EI.
pub const MIN_VARIANCE: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct Gp {
    x: Vec<Vec<f64>>,
    chol: Vec<Vec<f64>>,
    alpha: Vec<f64>,
    pub length_scales: Vec<f64>,
    /// Signal variance in standardized units (the output sample variance).
    pub signal_var: f64,
    y_mean: f64,
    y_scale: f64,
    flat: bool,
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Lower-triangular Cholesky factor, or `None` if `a` is not positive
/// definite.
pub fn cholesky(a: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let n = a.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let d = a[i][i] - s;
                if d <= 0.0 || !d.is_finite() {
                    return None;
                }
                l[i][j] = d.sqrt();
            } else {
                l[i][j] = (a[i][j] - s) / l[j][j];
            }
        }
    }
    Some(l)
}

fn forward(l: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut y = vec![0.0; n];
    for i in 0..n {
        let s: f64 = (0..i).map(|k| l[i][k] * y[k]).sum();
        y[i] = (b[i] - s) / l[i][i];
    }
    y
}

fn backward(l: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
    let n = y.len();
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| l[k][i] * x[k]).sum();
        x[i] = (y[i] - s) / l[i][i];
    }
    x
}

impl Gp {
    /// Fits on unit-cube inputs. `noise_var` is each observation's variance
    /// in output units (se²); jitter is added on top.
    pub fn fit(x: &[Vec<f64>], y: &[f64], noise_var: &[f64]) -> Result<Self> {
        let n = x.len();
        if n < 2 || y.len() != n || noise_var.len() != n {
            return Err(Error::InsufficientData("a surrogate needs at least 2 trials".into()));
        }
        let d = x[0].len();
        let y_mean = y.iter().sum::<f64>() / n as f64;
        let var = y.iter().map(|v| (v - y_mean).powi(2)).sum::<f64>() / n as f64;
        let flat = var.sqrt() < 1e-12;
        if flat {
            log::warn!("all trial outcomes are identical; using a flat surrogate");
        }
        let y_scale = if flat { 1.0 } else { var.sqrt() };
        let length_scales: Vec<f64> = (0..d)
            .map(|k| {
                let mut dists = Vec::with_capacity(n * (n - 1) / 2);
                for i in 0..n {
                    for j in i + 1..n {
                        dists.push((x[i][k] - x[j][k]).abs());
                    }
                }
                let m = median(dists);
                if m > 1e-6 {
                    m
                } else {
                    0.5
                }
            })
            .collect();
        let mut gp = Gp {
            x: x.to_vec(),
            chol: Vec::new(),
            alpha: vec![0.0; n],
            length_scales,
            signal_var: 1.0,
            y_mean,
            y_scale,
            flat,
        };
        let ys: Vec<f64> = y.iter().map(|v| (v - y_mean) / y_scale).collect();
        let mut jitter = JITTER;
        loop {
            let k: Vec<Vec<f64>> = (0..n)
                .map(|i| {
                    (0..n)
                        .map(|j| {
                            let mut v = gp.kernel(&x[i], &x[j]);
                            if i == j {
                                v += noise_var[i] / (y_scale * y_scale) + jitter;
                            }
                            v
                        })
                        .collect()
                })
                .collect();
            if let Some(l) = cholesky(&k) {
                gp.alpha = backward(&l, &forward(&l, &ys));
                gp.chol = l;
                return Ok(gp);
            }
            jitter *= 10.0;
            if jitter > 1.0 {
                return Err(Error::State("covariance matrix is not positive definite".into()));
            }
        }
    }

    fn kernel(&self, a: &[f64], b: &[f64]) -> f64 {
        let r2: f64 = a.iter().zip(b).zip(&self.length_scales).map(|((a, b), l)| ((a - b) / l).powi(2)).sum();
        self.signal_var * (-0.5 * r2).exp()
    }

    /// Posterior mean and variance in standardized units.
    fn predict_std(&self, x: &[f64]) -> (f64, f64) {
        if self.flat {
            return (0.0, self.signal_var);
        }
        let ks: Vec<f64> = self.x.iter().map(|xi| self.kernel(xi, x)).collect();
        let mean: f64 = ks.iter().zip(&self.alpha).map(|(k, a)| k * a).sum();
        let v = forward(&self.chol, &ks);
        let var = (self.signal_var - v.iter().map(|v| v * v).sum::<f64>()).max(0.0);
        (mean, var)
    }

    /// Posterior mean and variance in output units.
    pub fn predict(&self, x: &[f64]) -> (f64, f64) {
        let (m, v) = self.predict_std(x);
        (self.y_mean + m * self.y_scale, v * self.y_scale * self.y_scale)
    }

    /// Best posterior mean over the training inputs.
    pub fn incumbent(&self) -> f64 {
        self.x.iter().map(|x| self.predict(x).0).fold(f64::NEG_INFINITY, f64::max)
    }

    /// Expected improvement over `best` for maximization. Posterior sd is
    /// treated as 0 below [`MIN_VARIANCE`], so EI at a noiseless incumbent is
    /// exactly 0.
    pub fn expected_improvement(&self, x: &[f64], best: f64) -> f64 {
        let (m, v) = self.predict_std(x);
        let mean = self.y_mean + m * self.y_scale;
        let gap = (mean - best) / self.y_scale;
        if v < MIN_VARIANCE {
            return (gap * self.y_scale).max(0.0);
        }
        let s = v.sqrt();
        let z = gap / s;
        let ei = gap * normal_cdf(z) + s * normal_pdf(z);
        (ei * self.y_scale).max(0.0)
    }
}

pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

pub fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}
