//! Regression-based backward solvers.
//!
//! Both solvers share one backward induction: at step `i` the conditional
//! expectation `E[Y_{i+1} | F_i]` and the martingale integrand
//! `Z_i = E[(Y_{i+1} - E[Y_{i+1}|F_i]) dW_i | F_i] / dt` are projected on a
//! polynomial basis of the conditioning state, then `Y_i` is resolved from
//! the generator. The quadratic solver truncates `Z` and iterates the
//! implicit `y` argument; the linear solver has a closed form.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bmo::{estimate_bmo2, Bmo2Estimate};
use crate::error::{Error, Result};
use crate::model::{a_priori_bound, DerivedConstants, ProblemSpec};
use crate::paths::{BrownianBatch, ForwardBatch, TimeGrid, PATH_CHUNK};
use crate::regression::{default_ridge, Design, RegressionBasis, StateView, StepFit};
use crate::stats::Estimate;

/// Abort when `|Y|` exceeds this multiple of `A`.
pub const BOUND_ABORT_FACTOR: f64 = 10.0;

/// Iteration cap of the implicit `y` sub-iteration.
pub const FIXED_POINT_MAX_ITER: usize = 50;

const FIXED_POINT_TOL: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BsdeOptions {
    /// Total degree of the polynomial basis.
    pub degree: usize,
    /// Global cap `|Z| <= R`; `None` selects `10 sqrt(A/T)`.
    pub truncation_radius: Option<f64>,
    /// `None` selects `1e-8 M`.
    pub ridge: Option<f64>,
}

impl Default for BsdeOptions {
    fn default() -> Self {
        Self { degree: 3, truncation_radius: None, ridge: None }
    }
}

impl BsdeOptions {
    pub fn with_degree(degree: usize) -> Self {
        Self { degree, ..Self::default() }
    }

    fn ridge_for(&self, rows: usize) -> f64 {
        self.ridge.unwrap_or_else(|| default_ridge(rows))
    }
}

/// Regression basis together with the conditioning state it reads.
#[derive(Debug, Clone, Copy)]
pub struct Conditioning<'a> {
    pub states: StateView<'a>,
    pub basis: &'a RegressionBasis,
}

impl<'a> Conditioning<'a> {
    pub fn new(states: StateView<'a>, basis: &'a RegressionBasis) -> Result<Self> {
        if basis.state_dim() != states.dim {
            return Err(Error::Dimension(format!(
                "basis reads {} variables, conditioning state has {}",
                basis.state_dim(),
                states.dim
            )));
        }
        Ok(Self { states, basis })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackwardSolution {
    pub paths: usize,
    pub steps: usize,
    pub d: usize,
    /// `M x (N+1)`.
    pub y: Vec<f64>,
    /// `M x (N+1) x d`; the last time slot is zero.
    pub z: Vec<f64>,
    pub basis: RegressionBasis,
    pub truncation_radius: f64,
    /// Per step `0..N`: outputs `[E[Y_{i+1}|F_i], Z^1, .., Z^d]`.
    pub fits: Vec<StepFit>,
    /// Per path `Y_N + sum_i driver_i dt`; its mean equals the mean of `Y_0`.
    pub pathwise: Vec<f64>,
    pub y0: Estimate,
}

impl BackwardSolution {
    pub fn y_at(&self, path: usize, step: usize) -> f64 {
        self.y[path * (self.steps + 1) + step]
    }

    pub fn z_at(&self, path: usize, step: usize) -> &[f64] {
        let o = (path * (self.steps + 1) + step) * self.d;
        &self.z[o..o + self.d]
    }

    /// `Z` on steps `0..N` only, `M x N x d`, the layout of stochastic
    /// integrands.
    pub fn z_integrand(&self) -> Vec<f64> {
        let (n, d) = (self.steps, self.d);
        let mut out = vec![0.0; self.paths * n * d];
        out.par_chunks_mut(n * d).enumerate().for_each(|(p, row)| {
            row.copy_from_slice(&self.z[p * (n + 1) * d..(p * (n + 1) + n) * d]);
        });
        out
    }

    pub fn sup_abs_y(&self) -> f64 {
        self.y.par_iter().map(|v| v.abs()).reduce(|| 0.0, f64::max)
    }

    /// Per-step regression coefficients: `step,output,index,value`.
    pub fn coefficients_csv(&self) -> String {
        let mut s = String::from("step,output,index,value\n");
        for (i, fit) in self.fits.iter().enumerate() {
            for (o, c) in fit.coefficients.iter().enumerate() {
                for (j, v) in c.iter().enumerate() {
                    s.push_str(&format!("{i},{o},{j},{v:e}\n"));
                }
            }
        }
        s
    }
}

/// Per-path resolution of `Y_i` from `E[Y_{i+1}|F_i]` and `Z_i`: returns
/// `(Y_i, driver)` with `Y_i = cy + driver * dt`.
trait StepRule: Sync {
    fn resolve(&self, path: usize, step: usize, cy: f64, z: &[f64]) -> Result<(f64, f64)>;
}

struct Induction<'a> {
    grid: &'a TimeGrid,
    noise: &'a BrownianBatch,
    cond: Conditioning<'a>,
    ridge: f64,
    truncation: f64,
    y_abort: f64,
}

impl Induction<'_> {
    fn run(&self, terminal: Vec<f64>, rule: &dyn StepRule) -> Result<BackwardSolution> {
        let m = self.noise.paths;
        let n = self.grid.steps;
        let d = self.noise.dim;
        let dt = self.grid.dt;
        let w = n + 1;
        if self.cond.states.paths != m || self.cond.states.steps != n || terminal.len() != m {
            return Err(Error::Dimension("backward solver inputs disagree on M or N".into()));
        }
        let mut y = vec![0.0; m * w];
        let mut z = vec![0.0; m * w * d];
        for (p, v) in terminal.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite { what: "terminal condition", t: self.grid.horizon });
            }
            y[p * w + n] = *v;
        }
        let mut next = terminal;
        let mut drv_sum = vec![0.0; m];
        let mut fits = Vec::with_capacity(n);
        let mut col = vec![0.0; m];
        let mut zcol = vec![0.0; m * d];
        for i in (0..n).rev() {
            let st = self.cond.states.at_step(i);
            let design = Design::build(self.cond.basis, &st, m)?;
            drop(st);
            let factor = design.factor(self.ridge)?;
            let (mut fit, mut fitted) = factor.solve(&[&next])?;
            let cy = fitted.pop().expect("one target");
            let targets: Vec<Vec<f64>> = (0..d)
                .map(|j| {
                    let mut t = vec![0.0; m];
                    t.par_chunks_mut(PATH_CHUNK).enumerate().for_each(|(c, out)| {
                        for (k, o) in out.iter_mut().enumerate() {
                            let p = c * PATH_CHUNK + k;
                            *o = (next[p] - cy[p]) * self.noise.increment(p, i)[j] / dt;
                        }
                    });
                    t
                })
                .collect();
            let refs: Vec<&[f64]> = targets.iter().map(|t| t.as_slice()).collect();
            let (zfit, zf) = factor.solve(&refs)?;
            drop(targets);
            fit.coefficients.extend(zfit.coefficients);
            fits.push(fit);

            let t = self.grid.times[i];
            let results: Vec<Result<()>> = col
                .par_chunks_mut(PATH_CHUNK)
                .zip(zcol.par_chunks_mut(PATH_CHUNK * d))
                .zip(drv_sum.par_chunks_mut(PATH_CHUNK))
                .enumerate()
                .map(|(c, ((yc, zc), ds))| {
                    for (k, ((yv, zv), sv)) in yc.iter_mut().zip(zc.chunks_exact_mut(d)).zip(ds).enumerate() {
                        let p = c * PATH_CHUNK + k;
                        let mut norm2 = 0.0;
                        for j in 0..d {
                            zv[j] = zf[j][p];
                            norm2 += zv[j] * zv[j];
                        }
                        let norm = norm2.sqrt();
                        if norm > self.truncation {
                            let s = self.truncation / norm;
                            zv.iter_mut().for_each(|v| *v *= s);
                        }
                        let (yi, drv) = rule.resolve(p, i, cy[p], zv)?;
                        if !yi.is_finite() {
                            return Err(Error::NonFinite { what: "Y", t });
                        }
                        if yi.abs() > self.y_abort {
                            return Err(Error::BoundViolation { step: i, value: yi.abs(), threshold: self.y_abort });
                        }
                        *yv = yi;
                        *sv += drv * dt;
                    }
                    Ok(())
                })
                .collect();
            results.into_iter().collect::<Result<Vec<()>>>()?;
            for p in 0..m {
                y[p * w + i] = col[p];
                z[(p * w + i) * d..(p * w + i + 1) * d].copy_from_slice(&zcol[p * d..(p + 1) * d]);
            }
            std::mem::swap(&mut next, &mut col);
        }
        fits.reverse();
        let pathwise: Vec<f64> = (0..m).map(|p| y[p * w + n] + drv_sum[p]).collect();
        let y0 = Estimate::from_samples(&pathwise);
        Ok(BackwardSolution {
            paths: m,
            steps: n,
            d,
            y,
            z,
            basis: self.cond.basis.clone(),
            truncation_radius: self.truncation,
            fits,
            pathwise,
            y0,
        })
    }
}

struct QuadraticRule<'a> {
    spec: &'a ProblemSpec,
    grid: &'a TimeGrid,
    forward: &'a ForwardBatch,
}

impl StepRule for QuadraticRule<'_> {
    fn resolve(&self, path: usize, step: usize, cy: f64, z: &[f64]) -> Result<(f64, f64)> {
        let t = self.grid.times[step];
        let dt = self.grid.dt;
        let x = self.forward.state(path, step);
        let u = self.forward.control(path, step);
        let c = self.spec.coeffs.as_ref();
        let mut y = cy;
        for _ in 0..FIXED_POINT_MAX_ITER {
            let f = c.generator(t, x, y, z, u);
            if !f.is_finite() {
                return Err(Error::NonFinite { what: "generator", t });
            }
            let ny = cy + f * dt;
            if (ny - y).abs() <= FIXED_POINT_TOL * (1.0 + ny.abs()) {
                return Ok((ny, f));
            }
            y = ny;
        }
        Err(Error::FixedPoint { step })
    }
}

/// Default truncation radius `10 sqrt(A / T)`.
pub fn default_truncation_radius(spec: &ProblemSpec) -> f64 {
    let (_, a) = a_priori_bound(spec);
    10.0 * (a / spec.horizon).sqrt()
}

fn check_shapes(spec: &ProblemSpec, grid: &TimeGrid, noise: &BrownianBatch, forward: &ForwardBatch) -> Result<()> {
    if noise.steps != grid.steps || noise.dim != spec.dims.d {
        return Err(Error::Dimension("noise does not match grid/spec".into()));
    }
    if forward.paths != noise.paths || forward.steps != grid.steps || forward.n != spec.dims.n {
        return Err(Error::Dimension("forward batch does not match noise/spec".into()));
    }
    Ok(())
}

/// Quadratic BSDE of the state system, conditioning on `X_i` with a
/// polynomial basis of `opts.degree`.
pub fn solve_quadratic_bsde(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    noise: &BrownianBatch,
    forward: &ForwardBatch,
    opts: &BsdeOptions,
) -> Result<BackwardSolution> {
    let basis = RegressionBasis::polynomial(spec.dims.n, opts.degree);
    let cond = Conditioning::new(forward.state_view(), &basis)?;
    solve_quadratic_bsde_with(spec, grid, noise, forward, cond, opts)
}

/// As [`solve_quadratic_bsde`] with caller-chosen conditioning.
pub fn solve_quadratic_bsde_with(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    noise: &BrownianBatch,
    forward: &ForwardBatch,
    cond: Conditioning<'_>,
    opts: &BsdeOptions,
) -> Result<BackwardSolution> {
    check_shapes(spec, grid, noise, forward)?;
    let (_, a) = a_priori_bound(spec);
    let truncation = match opts.truncation_radius {
        Some(r) if r > 0.0 => r,
        Some(r) => return Err(Error::InvalidProblem(format!("truncation radius must be > 0, got {r}"))),
        None => default_truncation_radius(spec),
    };
    let y_abort = if a.is_finite() { BOUND_ABORT_FACTOR * a } else { f64::INFINITY };
    let c = spec.coeffs.as_ref();
    let terminal: Vec<f64> = (0..forward.paths).map(|p| c.terminal(forward.state(p, grid.steps))).collect();
    let ind = Induction { grid, noise, cond, ridge: opts.ridge_for(noise.paths), truncation, y_abort };
    ind.run(terminal, &QuadraticRule { spec, grid, forward })
}

/// Data of the linear BSDE
/// `Y_t = xi + int (lambda Y + mu . Z + phi) ds - int Z dW`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearBsdeData {
    pub paths: usize,
    pub steps: usize,
    pub d: usize,
    /// `M`.
    pub xi: Vec<f64>,
    /// `M x N`.
    pub lambda: Vec<f64>,
    /// `M x N x d`.
    pub mu: Vec<f64>,
    /// `M x N`.
    pub phi: Vec<f64>,
    /// Declared bound on `|lambda|`.
    pub lambda_bound: f64,
}

impl LinearBsdeData {
    /// `lambda = mu = phi = 0`, `xi` as given.
    pub fn zero(paths: usize, steps: usize, d: usize, xi: Vec<f64>) -> Self {
        Self {
            paths,
            steps,
            d,
            xi,
            lambda: vec![0.0; paths * steps],
            mu: vec![0.0; paths * steps * d],
            phi: vec![0.0; paths * steps],
            lambda_bound: 0.0,
        }
    }

    pub fn validate(&self, dt: f64) -> Result<()> {
        let (m, n, d) = (self.paths, self.steps, self.d);
        if self.xi.len() != m || self.lambda.len() != m * n || self.mu.len() != m * n * d || self.phi.len() != m * n {
            return Err(Error::Dimension("linear BSDE data arrays have inconsistent shapes".into()));
        }
        if !(self.lambda_bound >= 0.0 && self.lambda_bound * dt < 1.0) {
            return Err(Error::InvalidProblem(format!(
                "lambda bound {} must satisfy bound * dt < 1 (dt = {dt})",
                self.lambda_bound
            )));
        }
        let tol = 1e-12 * (1.0 + self.lambda_bound);
        if self.lambda.iter().any(|l| !(l.abs() <= self.lambda_bound + tol)) {
            return Err(Error::InvalidProblem("lambda exceeds its declared bound".into()));
        }
        if self.mu.iter().chain(&self.phi).chain(&self.xi).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "linear BSDE data", t: f64::NAN });
        }
        Ok(())
    }
}

struct LinearRule<'a> {
    data: &'a LinearBsdeData,
    dt: f64,
}

impl StepRule for LinearRule<'_> {
    fn resolve(&self, path: usize, step: usize, cy: f64, z: &[f64]) -> Result<(f64, f64)> {
        let n = self.data.steps;
        let d = self.data.d;
        let lam = self.data.lambda[path * n + step];
        let mu = &self.data.mu[(path * n + step) * d..(path * n + step + 1) * d];
        let rest = mu.iter().zip(z).map(|(a, b)| a * b).sum::<f64>() + self.data.phi[path * n + step];
        let y = (cy + rest * self.dt) / (1.0 - lam * self.dt);
        Ok((y, lam * y + rest))
    }
}

/// Linear BSDE with the state `X_i` as conditioning variable.
pub fn solve_linear_bsde(
    data: &LinearBsdeData,
    grid: &TimeGrid,
    noise: &BrownianBatch,
    forward: &ForwardBatch,
    opts: &BsdeOptions,
) -> Result<BackwardSolution> {
    let basis = RegressionBasis::polynomial(forward.n, opts.degree);
    let cond = Conditioning::new(forward.state_view(), &basis)?;
    solve_linear_bsde_with(data, grid, noise, cond, opts)
}

pub fn solve_linear_bsde_with(
    data: &LinearBsdeData,
    grid: &TimeGrid,
    noise: &BrownianBatch,
    cond: Conditioning<'_>,
    opts: &BsdeOptions,
) -> Result<BackwardSolution> {
    data.validate(grid.dt)?;
    if data.paths != noise.paths || data.steps != grid.steps || data.d != noise.dim || noise.steps != grid.steps {
        return Err(Error::Dimension("linear BSDE data does not match grid/noise".into()));
    }
    let ind = Induction {
        grid,
        noise,
        cond,
        ridge: opts.ridge_for(noise.paths),
        truncation: f64::INFINITY,
        y_abort: f64::INFINITY,
    };
    ind.run(data.xi.clone(), &LinearRule { data, dt: grid.dt })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentBound {
    pub p: u32,
    /// Empirical `E[(int |Z|^2 dt)^p]`.
    pub value: f64,
    pub std_error: f64,
    /// `([p] + 1)! A^{2p}`.
    pub bound: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub a: f64,
    pub sup_y: f64,
    pub bmo2: Bmo2Estimate,
    /// `sup |Y| + bmo2^2`.
    pub lhs: f64,
    /// `A - lhs`.
    pub margin: f64,
    pub pass: bool,
    pub moments: Vec<MomentBound>,
}

/// Empirical check of `sup|Y| + ||Z.W||_BMO2^2 < A` and of the moment bounds
/// `E[(int |Z|^2)^p] < (p+1)! A^{2p}`, `p = 1, 2, 3`.
pub fn estimate_apriori_bound(
    solution: &BackwardSolution,
    constants: &DerivedConstants,
    grid: &TimeGrid,
    cond: Conditioning<'_>,
) -> Result<BoundReport> {
    let integrand = solution.z_integrand();
    let bmo2 = estimate_bmo2(&integrand, grid, solution.d, cond.states, cond.basis)?;
    let qv = crate::bmo::quadratic_variation(&integrand, solution.paths, solution.steps, solution.d, grid.dt);
    drop(integrand);
    let a = constants.a;
    let sup_y = solution.sup_abs_y();
    let lhs = sup_y + bmo2.estimate * bmo2.estimate;
    let mut moments = Vec::new();
    let mut fact = 1.0;
    for p in 1..=3u32 {
        fact *= (p + 1) as f64;
        let samples: Vec<f64> = qv.iter().map(|q| q.powi(p as i32)).collect();
        let e = Estimate::from_samples(&samples);
        let bound = fact * a.powi(2 * p as i32);
        moments.push(MomentBound { p, value: e.value, std_error: e.std_error, bound, pass: e.value < bound });
    }
    let pass = lhs < a && moments.iter().all(|m| m.pass);
    Ok(BoundReport { a, sup_y, bmo2, lhs, margin: a - lhs, pass, moments })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::families::{self, FnCoefficients};
    use crate::model::{derive_constants, Dims};
    use crate::paths::{simulate_brownian, solve_forward_sde, Control};
    use std::sync::Arc;

    fn scalar_spec(c: FnCoefficients) -> ProblemSpec {
        let base = families::zero_problem(Dims { n: 1, d: 1, k: 1 }, 1.0);
        let mut k = base.constants.clone();
        k.phi_sup = 10.0;
        ProblemSpec::new(base.dims, 1.0, vec![0.0], Arc::new(c), base.domain, k).unwrap()
    }

    fn brownian_setup(
        spec: &ProblemSpec,
        steps: usize,
        paths: usize,
        seed: u64,
    ) -> (TimeGrid, BrownianBatch, ForwardBatch) {
        let grid = TimeGrid::new(steps, spec.horizon).unwrap();
        let noise = simulate_brownian(&grid, 1, paths, seed, 0).unwrap();
        let fwd = solve_forward_sde(spec, &grid, &noise, &Control::constant(vec![0.0])).unwrap();
        (grid, noise, fwd)
    }

    #[test]
    fn constant_terminal_without_generator() {
        let c = FnCoefficients {
            diffusion: Box::new(|_, _, _| 1.0),
            terminal: Box::new(|_| 0.7),
            ..FnCoefficients::zero()
        };
        let spec = scalar_spec(c);
        let (grid, noise, fwd) = brownian_setup(&spec, 20, 2000, 1);
        let sol = solve_quadratic_bsde(&spec, &grid, &noise, &fwd, &BsdeOptions::default()).unwrap();
        assert!(sol.y.iter().all(|v| (v - 0.7).abs() < 1e-12));
        assert!(sol.z.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn linear_in_y_generator_is_an_ode() {
        let a = 0.5;
        let c = FnCoefficients {
            diffusion: Box::new(|_, _, _| 1.0),
            generator: Box::new(move |_, _, y, _, _| a * y),
            generator_y: Box::new(move |_, _, _, _, _| a),
            terminal: Box::new(|_| 2.0),
            ..FnCoefficients::zero()
        };
        let spec = scalar_spec(c);
        let n = 50;
        let (grid, noise, fwd) = brownian_setup(&spec, n, 1000, 2);
        let sol = solve_quadratic_bsde(&spec, &grid, &noise, &fwd, &BsdeOptions::default()).unwrap();
        // implicit Euler: Y_i = c (1 - a dt)^{-(N - i)}
        let exact = 2.0 / (1.0 - a * grid.dt).powi(n as i32);
        assert!((sol.y_at(0, 0) - exact).abs() < 1e-10);
        assert!((sol.y_at(0, 0) - 2.0 * a.exp()).abs() < 2.0 * a * a * grid.dt * a.exp());
        assert!((sol.y0.value - exact).abs() < 1e-10);
    }

    #[test]
    fn terminal_condition_is_exact() {
        let spec = families::tanh_family(0.0, 1.0);
        let grid = TimeGrid::new(10, 1.0).unwrap();
        let noise = simulate_brownian(&grid, 1, 500, 3, 0).unwrap();
        let fwd = solve_forward_sde(&spec, &grid, &noise, &Control::constant(vec![0.2])).unwrap();
        let sol = solve_quadratic_bsde(&spec, &grid, &noise, &fwd, &BsdeOptions::default()).unwrap();
        for p in 0..500 {
            assert_eq!(sol.y_at(p, 10), fwd.state(p, 10)[0].sin());
        }
        let mean_y0 = (0..500).map(|p| sol.y_at(p, 0)).sum::<f64>() / 500.0;
        assert!((mean_y0 - sol.y0.value).abs() < 1e-12);
    }

    #[test]
    fn exponential_utility_matches_certainty_equivalent() {
        let spec = families::exponential_utility(1.0, 0.0, 1.0);
        let grid = TimeGrid::new(50, 1.0).unwrap();
        let noise = simulate_brownian(&grid, 1, 20_000, 11, 0).unwrap();
        let fwd = solve_forward_sde(&spec, &grid, &noise, &Control::constant(vec![0.0])).unwrap();
        let sol = solve_quadratic_bsde(&spec, &grid, &noise, &fwd, &BsdeOptions::with_degree(5)).unwrap();
        let oracle = crate::quadrature::gauss_hermite_expectation(200, |w| w.tanh().exp()).unwrap().ln();
        let err = (sol.y0.value - oracle).abs();
        assert!(err < 3.0 * sol.y0.std_error + 0.01, "{} vs {oracle} (se {})", sol.y0.value, sol.y0.std_error);
    }

    #[test]
    fn quadratic_solver_reduces_to_linear_on_affine_generators() {
        let (lam, mu) = (-0.3, 0.4);
        let c = FnCoefficients {
            diffusion: Box::new(|_, _, _| 1.0),
            generator: Box::new(move |_, x, y, z, _| lam * y + mu * z + x.sin()),
            generator_x: Box::new(|_, x, _, _, _| x.cos()),
            generator_y: Box::new(move |_, _, _, _, _| lam),
            generator_z: Box::new(move |_, _, _, _, _| mu),
            terminal: Box::new(|x| x.tanh()),
            terminal_x: Box::new(|x| 1.0 / x.cosh().powi(2)),
            ..FnCoefficients::zero()
        };
        let spec = scalar_spec(c);
        let (grid, noise, fwd) = brownian_setup(&spec, 20, 3000, 4);
        let opts = BsdeOptions { truncation_radius: Some(f64::INFINITY), ..BsdeOptions::default() };
        let q = solve_quadratic_bsde(&spec, &grid, &noise, &fwd, &opts).unwrap();
        let (m, n) = (3000, 20);
        let mut data = LinearBsdeData::zero(m, n, 1, (0..m).map(|p| fwd.state(p, n)[0].tanh()).collect());
        data.lambda = vec![lam; m * n];
        data.mu = vec![mu; m * n];
        data.lambda_bound = lam.abs();
        for p in 0..m {
            for i in 0..n {
                data.phi[p * n + i] = fwd.state(p, i)[0].sin();
            }
        }
        let l = solve_linear_bsde(&data, &grid, &noise, &fwd, &opts).unwrap();
        let dy = q.y.iter().zip(&l.y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let dz = q.z.iter().zip(&l.z).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(dy <= 1e-10 && dz <= 1e-10, "dy {dy} dz {dz}");
    }

    #[test]
    fn linear_trivial_and_ode_cases() {
        let spec = families::constant_coefficients(0.0, 1.0, 0.0);
        let (grid, noise, fwd) = brownian_setup(&spec, 40, 1000, 5);
        let data = LinearBsdeData::zero(1000, 40, 1, vec![1.5; 1000]);
        let sol = solve_linear_bsde(&data, &grid, &noise, &fwd, &BsdeOptions::default()).unwrap();
        assert!(sol.y.iter().all(|v| (v - 1.5).abs() < 1e-12));
        assert!(sol.z.iter().all(|v| v.abs() < 1e-12));

        let mut data = LinearBsdeData::zero(1000, 40, 1, vec![1.0; 1000]);
        data.lambda = vec![0.8; 1000 * 40];
        data.lambda_bound = 0.8;
        let sol = solve_linear_bsde(&data, &grid, &noise, &fwd, &BsdeOptions::default()).unwrap();
        assert!((sol.y_at(0, 0) - 0.8f64.exp()).abs() < 0.8 * 0.8 * grid.dt * 3.0);
    }

    #[test]
    fn linear_bsde_girsanov_shift() {
        // Y_0 = E_Q[W_T] with dQ = E(m W) dP, i.e. m T
        let m_drift = 0.6;
        let spec = families::constant_coefficients(0.0, 1.0, 0.0);
        let (grid, noise, fwd) = brownian_setup(&spec, 50, 20_000, 6);
        let (m, n) = (20_000, 50);
        let mut data = LinearBsdeData::zero(m, n, 1, (0..m).map(|p| fwd.state(p, n)[0]).collect());
        data.mu = vec![m_drift; m * n];
        let sol = solve_linear_bsde(&data, &grid, &noise, &fwd, &BsdeOptions::with_degree(1)).unwrap();
        assert!((sol.y0.value - m_drift).abs() < 3.0 * sol.y0.std_error + 1e-3, "{:?}", sol.y0);
        let zmean = sol.z_integrand().iter().sum::<f64>() / (m * n) as f64;
        assert!((zmean - 1.0).abs() < 0.02);
    }

    #[test]
    fn grid_refinement_reduces_error_on_linear_family() {
        // xi = 1 + W_T, lambda = 1: Y_0 = e
        let spec = families::constant_coefficients(0.0, 1.0, 0.0);
        let mut errs = [0.0; 2];
        for (slot, n) in [10usize, 20].into_iter().enumerate() {
            for seed in 0..10 {
                let (grid, noise, fwd) = brownian_setup(&spec, n, 10_000, 100 + seed);
                let mut data =
                    LinearBsdeData::zero(10_000, n, 1, (0..10_000).map(|p| 1.0 + fwd.state(p, n)[0]).collect());
                data.lambda = vec![1.0; 10_000 * n];
                data.lambda_bound = 1.0;
                let sol = solve_linear_bsde(&data, &grid, &noise, &fwd, &BsdeOptions::with_degree(1)).unwrap();
                errs[slot] += (sol.y0.value - 1f64.exp()).abs() / 10.0;
            }
        }
        assert!(errs[1] < errs[0], "{errs:?}");
    }

    #[test]
    fn linear_data_estimate_constant_is_stable() {
        // E[sup|Y|^2] + E[int |Z|^2] <= C (E[|xi|^4] + E[(int |phi|)^4])^{1/2}
        let spec = families::constant_coefficients(0.0, 1.0, 0.0);
        let ratio = |seed: u64| {
            let (grid, noise, fwd) = brownian_setup(&spec, 25, 10_000, seed);
            let (m, n) = (10_000, 25);
            let mut data = LinearBsdeData::zero(m, n, 1, (0..m).map(|p| fwd.state(p, n)[0].sin()).collect());
            data.lambda = vec![-0.5; m * n];
            data.lambda_bound = 0.5;
            data.mu = vec![0.3; m * n];
            for p in 0..m {
                for i in 0..n {
                    data.phi[p * n + i] = fwd.state(p, i)[0].cos();
                }
            }
            let sol = solve_linear_bsde(&data, &grid, &noise, &fwd, &BsdeOptions::default()).unwrap();
            let mut lhs = 0.0;
            let mut rhs = 0.0;
            for p in 0..m {
                let sup = (0..=n).map(|i| sol.y_at(p, i).abs()).fold(0.0, f64::max);
                let qv: f64 = (0..n).map(|i| sol.z_at(p, i)[0].powi(2) * grid.dt).sum();
                let iphi: f64 = (0..n).map(|i| data.phi[p * n + i].abs() * grid.dt).sum();
                lhs += sup * sup + qv;
                rhs += data.xi[p].powi(4) + iphi.powi(4);
            }
            (lhs / m as f64) / (rhs / m as f64).sqrt()
        };
        let c0 = ratio(0);
        for seed in 1..4 {
            let r = ratio(seed);
            assert!(r <= 1.1 * c0 && r >= c0 / 1.1, "C drifted: {c0} vs {r}");
        }
    }

    #[test]
    fn apriori_bound_report() {
        let spec = families::exponential_utility(1.0, 0.0, 1.0);
        let dc = derive_constants(&spec).unwrap();
        let (grid, noise, fwd) = brownian_setup(&spec, 20, 5000, 7);
        let sol = solve_quadratic_bsde(&spec, &grid, &noise, &fwd, &BsdeOptions::default()).unwrap();
        let cond = Conditioning::new(fwd.state_view(), &sol.basis).unwrap();
        let r = estimate_apriori_bound(&sol, &dc, &grid, cond).unwrap();
        assert!(r.pass && r.margin > 0.0, "{r:?}");

        // Z = 0: every bound holds trivially
        let zero = families::zero_problem(Dims { n: 1, d: 1, k: 1 }, 1.0);
        let dz = derive_constants(&zero).unwrap();
        let (grid, noise, fwd) = brownian_setup(&zero, 10, 500, 8);
        let sol = solve_quadratic_bsde(&zero, &grid, &noise, &fwd, &BsdeOptions::default()).unwrap();
        let cond = Conditioning::new(fwd.state_view(), &sol.basis).unwrap();
        let r = estimate_apriori_bound(&sol, &dz, &grid, cond).unwrap();
        assert_eq!(r.bmo2.estimate, 0.0);
        assert!(r.moments.iter().all(|m| m.value == 0.0 && m.pass));
    }

    #[test]
    fn fixed_point_failure_is_reported() {
        // f = 200 y with dt = 0.01: the y-iteration is expansive
        let c = FnCoefficients {
            diffusion: Box::new(|_, _, _| 1.0),
            generator: Box::new(|_, _, y, _, _| 200.0 * y),
            terminal: Box::new(|_| 1.0),
            ..FnCoefficients::zero()
        };
        let spec = scalar_spec(c);
        let (grid, noise, fwd) = brownian_setup(&spec, 100, 100, 9);
        let err = solve_quadratic_bsde(&spec, &grid, &noise, &fwd, &BsdeOptions::default()).unwrap_err();
        assert!(matches!(err, Error::FixedPoint { step: 99 }), "{err}");
    }
}
