//! Gauss–Hermite quadrature for Gaussian expectations.

use crate::error::{Error, Result};

/// Orthonormal Hermite functions `psi_{n-1}(x), psi_n(x)`, which include the
/// factor `exp(-x^2/2)` and so stay in range for large `x`.
fn hermite_functions(n: usize, x: f64) -> (f64, f64) {
    let mut prev = 0.0;
    let mut cur = std::f64::consts::PI.powf(-0.25) * (-0.5 * x * x).exp();
    for j in 1..=n {
        let jf = j as f64;
        let next = (2.0 / jf).sqrt() * x * cur - ((jf - 1.0) / jf).sqrt() * prev;
        prev = cur;
        cur = next;
    }
    (prev, cur)
}

/// Nodes and weights for `int exp(-x^2) g(x) dx`. Roots of `psi_n` are
/// bracketed by a sign scan and refined by bisection; the weights are
/// `exp(-x^2) / (n psi_{n-1}(x)^2)`.
pub fn gauss_hermite(n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if n == 0 {
        return Err(Error::Domain("quadrature needs at least one node".into()));
    }
    // all roots lie below sqrt(2n + 1); neighbouring roots are at least
    // ~ pi / sqrt(2n + 1) apart, so this scan step cannot skip a pair
    let hi = (2.0 * n as f64 + 1.0).sqrt() + 1.0;
    let step = 0.05 / (2.0 * n as f64 + 1.0).sqrt();
    let mut roots = Vec::new();
    if n % 2 == 1 {
        roots.push(0.0);
    }
    let mut a = if n % 2 == 1 { step } else { 0.0 };
    let mut fa = hermite_functions(n, a).1;
    while a < hi {
        let b = a + step;
        let fb = hermite_functions(n, b).1;
        if fa.signum() != fb.signum() && fa != 0.0 {
            let (mut lo, mut up) = (a, b);
            for _ in 0..200 {
                let mid = 0.5 * (lo + up);
                if mid <= lo || mid >= up {
                    break;
                }
                if hermite_functions(n, mid).1.signum() == fa.signum() {
                    lo = mid;
                } else {
                    up = mid;
                }
            }
            roots.push(0.5 * (lo + up));
        }
        a = b;
        fa = fb;
    }
    let positive = roots.iter().filter(|r| **r > 0.0).count();
    if positive != n / 2 {
        return Err(Error::Degenerate(format!("found {positive} positive Hermite roots, expected {}", n / 2)));
    }
    let mut x: Vec<f64> = roots.iter().filter(|r| **r > 0.0).map(|r| -r).collect();
    x.extend(roots.iter().rev().cloned());
    x.sort_by(f64::total_cmp);
    let w = x
        .iter()
        .map(|&xi| {
            let (pm1, _) = hermite_functions(n, xi);
            (-xi * xi).exp() / (n as f64 * pm1 * pm1)
        })
        .collect();
    Ok((x, w))
}

/// `E[g(W)]` for `W ~ N(0, 1)` with an `n`-point rule.
pub fn gauss_hermite_expectation(n: usize, g: impl Fn(f64) -> f64) -> Result<f64> {
    let (x, w) = gauss_hermite(n)?;
    let s = std::f64::consts::SQRT_2;
    let total: f64 = x.iter().zip(&w).map(|(xi, wi)| wi * g(s * xi)).sum();
    Ok(total / std::f64::consts::PI.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_sum_to_sqrt_pi() {
        for n in [1, 2, 5, 20, 200] {
            let (_, w) = gauss_hermite(n).unwrap();
            assert!((w.iter().sum::<f64>() - std::f64::consts::PI.sqrt()).abs() < 1e-12, "n = {n}");
        }
    }

    #[test]
    fn gaussian_moments() {
        assert!((gauss_hermite_expectation(200, |w| w * w).unwrap() - 1.0).abs() < 1e-12);
        assert!((gauss_hermite_expectation(200, |w| w.powi(4)).unwrap() - 3.0).abs() < 1e-11);
        assert!((gauss_hermite_expectation(200, |w| (0.5 * w).exp()).unwrap() - 0.125f64.exp()).abs() < 1e-12);
    }

    #[test]
    fn exponential_tanh_reference() {
        // E[exp(tanh W)], frozen from an independent adaptive integration
        let v = gauss_hermite_expectation(200, |w| w.tanh().exp()).unwrap();
        assert!((v - EXP_TANH_REFERENCE).abs() < 1e-12, "{v}");
    }

    const EXP_TANH_REFERENCE: f64 = 1.207_951_631_993_545_5;
}
