//! BMO martingale tools: the critical-exponent function `Psi` and its
//! inverse, the reverse Hölder constant, stochastic exponentials, a grid
//! estimator of the BMO2 norm of `H . W`, and the energy inequality.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::paths::{BrownianBatch, TimeGrid, PATH_CHUNK};
use crate::regression::{default_ridge, Design, RegressionBasis, StateView};
use crate::stats::{quantile, Estimate};

/// Guard on `|log E|` for stochastic exponentials.
pub const EXPONENT_GUARD: f64 = 700.0;

/// `Psi(x) = sqrt(1 + ln((2x-1)/(2(x-1))) / x^2) - 1` for `x > 1`.
pub fn psi(x: f64) -> Result<f64> {
    if x.is_nan() || x <= 1.0 {
        return Err(Error::Domain(format!("Psi is defined on (1, inf), got {x}")));
    }
    if x.is_infinite() {
        return Ok(0.0);
    }
    Ok(psi_log_excess((x - 1.0).ln()))
}

/// `Psi(1 + e^s)`. Stable for `s` far below `ln(f64::EPSILON)`, where
/// `1 + e^s` itself rounds to 1.
pub fn psi_log_excess(s: f64) -> f64 {
    // (2x-1)/(2(x-1)) = 1 + e^{-s}/2
    let log_term =
        if s >= 0.0 { (0.5 * (-s).exp()).ln_1p() } else { -s - std::f64::consts::LN_2 + (2.0 * s.exp()).ln_1p() };
    let x = 1.0 + s.exp();
    let r = log_term / (x * x);
    r / ((1.0 + r).sqrt() + 1.0)
}

/// Critical exponent `p_M` solving `Psi(p_M) = nu`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CriticalExponent {
    /// `nu = 0`: `p_M = +inf` and the conjugate is exactly 1.
    Infinite,
    /// `ln_excess = ln(p - 1)`; `p` alone loses all information once
    /// `p - 1 < f64::EPSILON`.
    Finite { p: f64, ln_excess: f64 },
}

impl CriticalExponent {
    pub fn p(&self) -> f64 {
        match self {
            CriticalExponent::Infinite => f64::INFINITY,
            CriticalExponent::Finite { p, .. } => *p,
        }
    }

    /// `p / (p - 1)`; exactly 1 for the infinite marker.
    pub fn conjugate(&self) -> f64 {
        match self {
            CriticalExponent::Infinite => 1.0,
            CriticalExponent::Finite { ln_excess, .. } => 1.0 + (-ln_excess).exp(),
        }
    }

    /// `Psi(p)` evaluated through the log-excess.
    pub fn psi(&self) -> f64 {
        match self {
            CriticalExponent::Infinite => 0.0,
            CriticalExponent::Finite { ln_excess, .. } => psi_log_excess(*ln_excess),
        }
    }
}

/// Inverts `Psi` by bisection on `s = ln(p - 1)`. The upper end is pushed
/// out by doubling `p` until `Psi < nu`; the lower end is pushed down until
/// `Psi > nu`.
pub fn psi_inverse(nu: f64) -> Result<CriticalExponent> {
    if nu.is_nan() || nu < 0.0 {
        return Err(Error::Domain(format!("Psi takes values in (0, inf), got {nu}")));
    }
    if nu == 0.0 {
        return Ok(CriticalExponent::Infinite);
    }
    if nu.is_infinite() {
        return Err(Error::Domain("Psi never reaches +inf".into()));
    }
    let mut x_hi = 2.0f64;
    while psi_log_excess((x_hi - 1.0).ln()) >= nu {
        x_hi *= 2.0;
        if !x_hi.is_finite() {
            return Err(Error::Domain(format!("no p with Psi(p) = {nu}")));
        }
    }
    let mut hi = (x_hi - 1.0).ln();
    let mut step = 1.0;
    let mut lo = hi - step;
    while psi_log_excess(lo) <= nu {
        step *= 2.0;
        lo = hi - step;
        if lo < -1e6 {
            return Err(Error::Domain(format!("no p with Psi(p) = {nu}")));
        }
    }
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if mid == lo || mid == hi {
            break;
        }
        if psi_log_excess(mid) > nu {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let s = if (psi_log_excess(lo) - nu).abs() < (psi_log_excess(hi) - nu).abs() { lo } else { hi };
    let resid = (psi_log_excess(s) - nu).abs();
    if resid > 1e-10 * nu.max(1.0) {
        return Err(Error::Degenerate(format!("Psi inversion stalled at residual {resid:e}")));
    }
    Ok(CriticalExponent::Finite { p: 1.0 + s.exp(), ln_excess: s })
}

/// Reverse Hölder constant
/// `K(p, m) = (1 - 2(p-1)/(2p-1) exp{p^2 (m^2 + 2m)})^{-1}`;
/// `None` when the bracket is not positive.
pub fn reverse_holder_k(p: f64, bmo2: f64) -> Result<Option<f64>> {
    if p.is_nan() || p < 1.0 {
        return Err(Error::Domain(format!("reverse Hölder exponent must be >= 1, got {p}")));
    }
    if bmo2.is_nan() || bmo2 < 0.0 {
        return Err(Error::Domain(format!("BMO norm must be >= 0, got {bmo2}")));
    }
    if p == 1.0 {
        return Ok(Some(1.0));
    }
    if bmo2 == 0.0 {
        return Ok(Some(2.0 * p - 1.0));
    }
    let e = (p * p * (bmo2 * bmo2 + 2.0 * bmo2)).exp();
    let bracket = 1.0 - 2.0 * (p - 1.0) / (2.0 * p - 1.0) * e;
    if bracket > 0.0 && bracket.is_finite() {
        Ok(Some(1.0 / bracket))
    } else {
        Ok(None)
    }
}

/// Per-path weights `exp{ sum_i lambda_i dt + mu_i . dW_i - |mu_i|^2 dt / 2 }`
/// accumulated in log space; `M x (N+1)` with the first column equal to 1.
///
/// `lambda` is `M x N` (or absent), `mu` is `M x N x d`.
pub fn exponential_weights(lambda: Option<&[f64]>, mu: &[f64], noise: &BrownianBatch) -> Result<Vec<f64>> {
    let (m, n, d) = (noise.paths, noise.steps, noise.dim);
    if mu.len() != m * n * d || lambda.is_some_and(|l| l.len() != m * n) {
        return Err(Error::Dimension("exponential weights: integrand does not match noise".into()));
    }
    let dt = noise.dt;
    let mut out = vec![0.0; m * (n + 1)];
    let results: Vec<Result<()>> = out
        .par_chunks_mut((n + 1) * PATH_CHUNK)
        .enumerate()
        .map(|(c, block)| {
            for (j, row) in block.chunks_exact_mut(n + 1).enumerate() {
                let p = c * PATH_CHUNK + j;
                let mut log = 0.0;
                row[0] = 1.0;
                for i in 0..n {
                    let h = &mu[(p * n + i) * d..(p * n + i + 1) * d];
                    let dw = noise.increment(p, i);
                    let mut inc = 0.0;
                    let mut h2 = 0.0;
                    for (a, w) in h.iter().zip(dw) {
                        inc += a * w;
                        h2 += a * a;
                    }
                    inc -= 0.5 * h2 * dt;
                    if let Some(l) = lambda {
                        inc += l[p * n + i] * dt;
                    }
                    log += inc;
                    if !(log.abs() <= EXPONENT_GUARD) {
                        return Err(Error::ExponentOverflow { step: i + 1, log: log.abs() });
                    }
                    row[i + 1] = log.exp();
                }
            }
            Ok(())
        })
        .collect();
    results.into_iter().collect::<Result<Vec<()>>>()?;
    Ok(out)
}

/// Stochastic exponential `E(H . W)` on the grid, `M x (N+1)`.
pub fn stochastic_exponential(integrand: &[f64], noise: &BrownianBatch) -> Result<Vec<f64>> {
    exponential_weights(None, integrand, noise)
}

/// Quadratic variation `sum_i |H_i|^2 dt` per path.
pub fn quadratic_variation(integrand: &[f64], paths: usize, steps: usize, dim: usize, dt: f64) -> Vec<f64> {
    (0..paths)
        .into_par_iter()
        .with_min_len(PATH_CHUNK)
        .map(|p| integrand[p * steps * dim..(p + 1) * steps * dim].iter().map(|h| h * h).sum::<f64>() * dt)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bmo2Estimate {
    /// Square root of the largest fitted conditional tail over grid times
    /// and paths; a lower bound of the true norm.
    pub estimate: f64,
    /// Same with the per-time 99.9% quantile over paths in place of the max.
    pub quantile_999: f64,
    /// Grid index where the maximum is attained.
    pub argmax_step: usize,
}

/// Grid estimator of `||H . W||_{BMO_2}`. At each grid time the remaining
/// quadratic variation is regressed on the conditioning state, and the
/// largest fitted value over paths and times is taken.
pub fn estimate_bmo2(
    integrand: &[f64],
    grid: &TimeGrid,
    dim: usize,
    states: StateView<'_>,
    basis: &RegressionBasis,
) -> Result<Bmo2Estimate> {
    let (m, n) = (states.paths, grid.steps);
    if integrand.len() != m * n * dim || states.steps != n {
        return Err(Error::Dimension("BMO estimator: integrand/state shapes differ".into()));
    }
    if integrand.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { what: "integrand", t: f64::NAN });
    }
    let dt = grid.dt;
    let mut tail = vec![0.0; m];
    let mut best = 0.0f64;
    let mut best_q = 0.0f64;
    let mut arg = 0;
    let ridge = default_ridge(m);
    for j in (0..n).rev() {
        tail.par_chunks_mut(PATH_CHUNK).enumerate().for_each(|(c, t)| {
            for (k, v) in t.iter_mut().enumerate() {
                let p = c * PATH_CHUNK + k;
                let h = &integrand[(p * n + j) * dim..(p * n + j + 1) * dim];
                *v += h.iter().map(|a| a * a).sum::<f64>() * dt;
            }
        });
        let st = states.at_step(j);
        let design = Design::build(basis, &st, m)?;
        let (_, fitted) = design.factor(ridge)?.solve(&[&tail])?;
        let fv = &fitted[0];
        let mx = fv.iter().cloned().fold(0.0, f64::max);
        if mx >= best {
            best = mx;
            arg = j;
        }
        best_q = best_q.max(quantile(fv, 0.999).max(0.0));
    }
    Ok(Bmo2Estimate { estimate: best.sqrt(), quantile_999: best_q.sqrt(), argmax_step: arg })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyCheck {
    pub n: u32,
    pub lhs: f64,
    pub rhs: f64,
    pub rel_std_error: f64,
    pub pass: bool,
}

/// `E[<M>_T^n] <= n! ||M||_{BMO_2}^{2n}` for `n = 1..=n_max`, with the
/// empirical left side allowed `5` relative standard errors of slack.
pub fn energy_check(
    integrand: &[f64],
    grid: &TimeGrid,
    paths: usize,
    dim: usize,
    n_max: u32,
    bmo2: f64,
) -> Result<Vec<EnergyCheck>> {
    if n_max == 0 || n_max > 6 {
        return Err(Error::Domain(format!("energy check supports 1 <= n <= 6, got {n_max}")));
    }
    let qv = quadratic_variation(integrand, paths, grid.steps, dim, grid.dt);
    let mut out = Vec::new();
    let mut fact = 1.0;
    for n in 1..=n_max {
        fact *= n as f64;
        let samples: Vec<f64> = qv.iter().map(|q| q.powi(n as i32)).collect();
        let e = Estimate::from_samples(&samples);
        let rel = if e.value > 0.0 { e.std_error / e.value } else { 0.0 };
        let rhs = fact * bmo2.powi(2 * n as i32);
        // the 1e-12 term absorbs round-off when both sides coincide
        let pass = e.value <= rhs * (1.0 + 5.0 * rel + 1e-12);
        out.push(EnergyCheck { n, lhs: e.value, rhs, rel_std_error: rel, pass });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReverseHolderCheck {
    pub bmo2: f64,
    pub p_m: CriticalExponent,
    pub p: f64,
    pub moment: f64,
    pub moment_std_error: f64,
    /// `1` below `p = 1`; `None` when `p_M` is infinite or the bracket of
    /// `K` is not positive.
    pub bound: Option<f64>,
    pub pass: bool,
    pub note: String,
}

/// Empirical `E[E(M_T)^p] <= K(p, ||M||)` at `p = fraction * p_M`.
/// Below `p = 1` the bound is 1.
pub fn reverse_holder_check(
    integrand: &[f64],
    noise: &BrownianBatch,
    bmo2: f64,
    fraction: f64,
) -> Result<ReverseHolderCheck> {
    let p_m = psi_inverse(bmo2)?;
    let p = fraction * p_m.p();
    let expo = stochastic_exponential(integrand, noise)?;
    let n = noise.steps;
    let samples: Vec<f64> = expo.chunks_exact(n + 1).map(|r| r[n].powf(p)).collect();
    let est = if p.is_finite() {
        Estimate::from_samples(&samples)
    } else {
        Estimate { value: f64::NAN, std_error: f64::NAN }
    };
    let (bound, note) = if !p.is_finite() {
        (None, "p_M is infinite; choose a finite exponent".to_string())
    } else if p < 1.0 {
        // E(M) is a uniformly integrable martingale, so Jensen gives K = 1 for p <= 1
        (Some(1.0), format!("p = {p:.6} < 1: Jensen bound K = 1"))
    } else {
        match reverse_holder_k(p, bmo2)? {
            Some(k) => (Some(k), String::new()),
            None => (None, "bracket of K is not positive".to_string()),
        }
    };
    let pass = match bound {
        Some(k) => est.value - 3.0 * est.std_error <= k,
        None => false,
    };
    Ok(ReverseHolderCheck { bmo2, p_m, p, moment: est.value, moment_std_error: est.std_error, bound, pass, note })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BmoReport {
    pub bmo2_estimate: f64,
    pub bmo2_quantile_999: f64,
    pub p_m: CriticalExponent,
    pub p_m_star: f64,
    pub energy_checks: Vec<EnergyCheck>,
    pub reverse_holder_p: f64,
    pub reverse_holder_k: Option<f64>,
}

/// Full diagnostic for `H . W`: BMO2 estimate, critical exponent, energy
/// inequality up to `n_max`, and `K` at `0.9 p_M`.
pub fn bmo_report(
    integrand: &[f64],
    grid: &TimeGrid,
    dim: usize,
    states: StateView<'_>,
    basis: &RegressionBasis,
    n_max: u32,
) -> Result<BmoReport> {
    let est = estimate_bmo2(integrand, grid, dim, states, basis)?;
    let p_m = psi_inverse(est.estimate)?;
    let energy_checks = energy_check(integrand, grid, states.paths, dim, n_max, est.estimate)?;
    let rp = 0.9 * p_m.p();
    let k = if rp.is_finite() && rp >= 1.0 { reverse_holder_k(rp, est.estimate)? } else { None };
    Ok(BmoReport {
        bmo2_estimate: est.estimate,
        bmo2_quantile_999: est.quantile_999,
        p_m,
        p_m_star: p_m.conjugate(),
        energy_checks,
        reverse_holder_p: rp,
        reverse_holder_k: k,
    })
}

/// CSV table `n,lhs,rhs,margin` for energy checks.
pub fn energy_csv(checks: &[EnergyCheck]) -> String {
    let mut s = String::from("n,lhs,rhs,margin\n");
    for c in checks {
        s.push_str(&format!("{},{:e},{:e},{:e}\n", c.n, c.lhs, c.rhs, c.rhs - c.lhs));
    }
    s
}

/// Mean of the terminal values of an `M x (N+1)` weight array.
pub fn terminal_mean(weights: &[f64], steps: usize) -> Estimate {
    let t: Vec<f64> = weights.chunks_exact(steps + 1).map(|r| r[steps]).collect();
    Estimate::from_samples(&t)
}
