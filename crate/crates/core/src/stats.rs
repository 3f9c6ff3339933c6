//! Small statistical helpers shared by the estimators.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::regression::det_sum;

/// Sample mean and standard error of the mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
}

impl Estimate {
    pub fn from_samples(samples: &[f64]) -> Self {
        let m = samples.len() as f64;
        if samples.is_empty() {
            return Self { value: f64::NAN, std_error: f64::NAN };
        }
        let mean = det_sum(samples) / m;
        let dev: Vec<f64> = samples.iter().map(|v| (v - mean) * (v - mean)).collect();
        let var = if samples.len() > 1 { det_sum(&dev) / (m - 1.0) } else { 0.0 };
        Self { value: mean, std_error: (var / m).sqrt() }
    }
}

/// Standard error of a difference of two estimates treated as independent.
pub fn combined_se(a: f64, b: f64) -> f64 {
    (a * a + b * b).sqrt()
}

/// Least-squares fit of `log2(y)` against `log2(x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub points: usize,
}

pub fn fit_log2_slope(x: &[f64], y: &[f64]) -> Result<SlopeFit> {
    let pts: Vec<(f64, f64)> =
        x.iter().zip(y).filter(|(a, b)| **a > 0.0 && **b > 0.0).map(|(a, b)| (a.log2(), b.log2())).collect();
    if pts.len() < 2 {
        return Err(Error::Degenerate("log-log fit needs two positive points".into()));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return Err(Error::Degenerate("log-log fit needs distinct abscissae".into()));
    }
    let slope = sxy / sxx;
    Ok(SlopeFit { slope, intercept: my - slope * mx, points: pts.len() })
}

/// Weights `w` such that `sum_k w_k y_k` is the value at `x = 0` of the
/// least-squares polynomial of the given degree through `(x_k, y_k)`.
pub fn intercept_weights(x: &[f64], degree: usize) -> Result<Vec<f64>> {
    let p = degree + 1;
    if x.len() < p {
        return Err(Error::Degenerate(format!("{} points for a degree-{degree} fit", x.len())));
    }
    // normal equations V^T V c = V^T y; intercept = e_0^T (V^T V)^{-1} V^T y
    let scale = x.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(f64::MIN_POSITIVE);
    let v: Vec<Vec<f64>> = x.iter().map(|xi| (0..p).map(|j| (xi / scale).powi(j as i32)).collect()).collect();
    let mut g = vec![vec![0.0; p]; p];
    for row in &v {
        for a in 0..p {
            for b in 0..p {
                g[a][b] += row[a] * row[b];
            }
        }
    }
    // solve G s = e_0 by Gauss-Jordan with partial pivoting
    let mut aug: Vec<Vec<f64>> = (0..p)
        .map(|i| {
            let mut r = g[i].clone();
            r.push(if i == 0 { 1.0 } else { 0.0 });
            r
        })
        .collect();
    for col in 0..p {
        let piv = (col..p).max_by(|&i, &j| aug[i][col].abs().total_cmp(&aug[j][col].abs())).unwrap();
        if aug[piv][col].abs() < 1e-14 {
            return Err(Error::Degenerate("polynomial fit is singular".into()));
        }
        aug.swap(col, piv);
        let d = aug[col][col];
        for e in aug[col].iter_mut() {
            *e /= d;
        }
        for r in 0..p {
            if r != col {
                let f = aug[r][col];
                if f != 0.0 {
                    for c in 0..=p {
                        aug[r][c] -= f * aug[col][c];
                    }
                }
            }
        }
    }
    let s: Vec<f64> = (0..p).map(|i| aug[i][p]).collect();
    Ok(v.iter().map(|row| row.iter().zip(&s).map(|(a, b)| a * b).sum()).collect())
}

/// Linear-interpolated empirical quantile, `q` in `[0, 1]`.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Max, mean and upper quantiles of a residual sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualStats {
    pub max: f64,
    pub mean: f64,
    pub q50: f64,
    pub q90: f64,
    pub q99: f64,
}

impl ResidualStats {
    pub fn from_abs(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self { max: 0.0, mean: 0.0, q50: 0.0, q90: 0.0, q99: 0.0 };
        }
        let max = values.iter().cloned().fold(0.0, f64::max);
        Self {
            max,
            mean: det_sum(values) / values.len() as f64,
            q50: quantile(values, 0.5),
            q90: quantile(values, 0.9),
            q99: quantile(values, 0.99),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_power_law() {
        let x = [0.25, 0.125, 0.0625, 0.03125];
        let y: Vec<f64> = x.iter().map(|e: &f64| 3.0 * e.powi(2)).collect();
        let f = fit_log2_slope(&x, &y).unwrap();
        assert!((f.slope - 2.0).abs() < 1e-12);
        assert!((f.intercept - 3f64.log2()).abs() < 1e-12);
    }

    #[test]
    fn intercept_weights_reproduce_quadratics() {
        let x = [0.25, 0.125, 0.0625, 0.03125, 0.015625];
        let w = intercept_weights(&x, 2).unwrap();
        let y: Vec<f64> = x.iter().map(|e| 1.5 - 2.0 * e + 0.7 * e * e).collect();
        let v: f64 = w.iter().zip(&y).map(|(a, b)| a * b).sum();
        assert!((v - 1.5).abs() < 1e-12);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn estimate_of_constant_has_zero_error() {
        let e = Estimate::from_samples(&[2.0; 10]);
        assert_eq!(e.value, 2.0);
        assert_eq!(e.std_error, 0.0);
    }

    #[test]
    fn quantiles_interpolate() {
        let v = [4.0, 1.0, 3.0, 2.0];
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert_eq!(quantile(&v, 1.0), 4.0);
        assert!((quantile(&v, 0.5) - 2.5).abs() < 1e-15);
    }
}
