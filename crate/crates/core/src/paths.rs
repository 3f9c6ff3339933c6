//! Time grid, Brownian increments, controls, and Euler–Maruyama solvers for
//! the state equation and its first-order variation.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ControlDomain, Dims, ProblemSpec};
use crate::regression::StateView;
use crate::stats::{fit_log2_slope, SlopeFit};

/// Paths per parallel work unit.
pub(crate) const PATH_CHUNK: usize = 256;

/// Abort threshold on `|X|`.
pub const EXPLOSION_BOUND: f64 = 1e8;

/// Uniform partition of `[0, T]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub steps: usize,
    pub horizon: f64,
    pub dt: f64,
    pub times: Vec<f64>,
}

impl TimeGrid {
    pub fn new(steps: usize, horizon: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidProblem("grid needs at least one step".into()));
        }
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::InvalidProblem("grid horizon must be positive".into()));
        }
        let dt = horizon / steps as f64;
        let mut times: Vec<f64> = (0..=steps).map(|i| i as f64 * dt).collect();
        times[steps] = horizon;
        Ok(Self { steps, horizon, dt, times })
    }

    pub fn time(&self, i: usize) -> f64 {
        self.times[i]
    }
}

/// `M x N x d` Brownian increments, path-major.
#[derive(Debug, Clone, PartialEq)]
pub struct BrownianBatch {
    pub paths: usize,
    pub steps: usize,
    pub dim: usize,
    pub dt: f64,
    pub seed: u64,
    pub stream_id: u64,
    pub increments: Vec<f64>,
}

impl BrownianBatch {
    pub fn increment(&self, path: usize, step: usize) -> &[f64] {
        let o = (path * self.steps + step) * self.dim;
        &self.increments[o..o + self.dim]
    }

    pub fn path(&self, path: usize) -> &[f64] {
        let w = self.steps * self.dim;
        &self.increments[path * w..(path + 1) * w]
    }

    /// Copies the paths `range` into a new batch.
    pub fn subset(&self, range: std::ops::Range<usize>) -> Self {
        let w = self.steps * self.dim;
        Self {
            paths: range.len(),
            increments: self.increments[range.start * w..range.end * w].to_vec(),
            ..self.clone_header()
        }
    }

    fn clone_header(&self) -> Self {
        Self {
            paths: self.paths,
            steps: self.steps,
            dim: self.dim,
            dt: self.dt,
            seed: self.seed,
            stream_id: self.stream_id,
            increments: Vec::new(),
        }
    }

    /// Terminal value `W_T` of component `j` on `path`.
    pub fn terminal(&self, path: usize, j: usize) -> f64 {
        self.path(path).chunks_exact(self.dim).map(|dw| dw[j]).sum()
    }
}

/// Each path owns a disjoint block of the ChaCha keystream
/// (`2^32` words per path), so the draws for a path do not depend on how
/// the batch is partitioned across workers.
fn path_rng(seed: u64, stream_id: u64, path: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id);
    rng.set_word_pos((path as u128) << 32);
    rng
}

pub fn simulate_brownian(
    grid: &TimeGrid,
    dim: usize,
    paths: usize,
    seed: u64,
    stream_id: u64,
) -> Result<BrownianBatch> {
    if paths == 0 || dim == 0 {
        return Err(Error::InvalidProblem("Brownian batch needs M >= 1 and d >= 1".into()));
    }
    let w = grid.steps * dim;
    let sq = grid.dt.sqrt();
    let mut increments = vec![0.0; paths * w];
    increments.par_chunks_mut(w * PATH_CHUNK).enumerate().for_each(|(c, block)| {
        for (j, row) in block.chunks_exact_mut(w).enumerate() {
            let mut rng = path_rng(seed, stream_id, c * PATH_CHUNK + j);
            for v in row.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = z * sq;
            }
        }
    });
    Ok(BrownianBatch { paths, steps: grid.steps, dim, dt: grid.dt, seed, stream_id, increments })
}

/// Feedback control `u(t_i, x)`.
pub trait FeedbackMap: Send + Sync {
    fn eval(&self, step: usize, t: f64, x: &[f64], out: &mut [f64]);
}

/// `M x (N+1) x k` per-path control values.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlTable {
    pub paths: usize,
    pub steps: usize,
    pub k: usize,
    pub values: Vec<f64>,
}

impl ControlTable {
    pub fn zeros(paths: usize, steps: usize, k: usize) -> Self {
        Self { paths, steps, k, values: vec![0.0; paths * (steps + 1) * k] }
    }

    pub fn at(&self, path: usize, step: usize) -> &[f64] {
        let o = (path * (self.steps + 1) + step) * self.k;
        &self.values[o..o + self.k]
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| *v == 0.0)
    }
}

/// A control process: a feedback map evaluated along the simulated state,
/// or an open-loop table of values per path and grid time.
#[derive(Clone)]
pub enum Control {
    Feedback(Arc<dyn FeedbackMap>),
    OpenLoop(Arc<ControlTable>),
}

impl Control {
    pub fn feedback(map: impl FeedbackMap + 'static) -> Self {
        Control::Feedback(Arc::new(map))
    }

    pub fn constant(value: Vec<f64>) -> Self {
        Control::feedback(ConstantControl(value))
    }
}

impl std::fmt::Debug for Control {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Control::Feedback(_) => f.write_str("Control::Feedback(..)"),
            Control::OpenLoop(t) => write!(f, "Control::OpenLoop({}x{}x{})", t.paths, t.steps + 1, t.k),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstantControl(pub Vec<f64>);

impl FeedbackMap for ConstantControl {
    fn eval(&self, _: usize, _: f64, _: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.0);
    }
}

/// Per-step affine feedback `u_i(x) = proj_U(a_i + B_i x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineFeedback {
    pub n: usize,
    pub k: usize,
    /// `(N+1) x k`.
    pub offset: Vec<f64>,
    /// `(N+1) x k x n`, row-major per step.
    pub gain: Vec<f64>,
    pub domain: Option<ControlDomain>,
}

impl AffineFeedback {
    pub fn constant_in_time(steps: usize, offset: &[f64], gain: &[f64], domain: Option<ControlDomain>) -> Self {
        let k = offset.len();
        let n = gain.len() / k.max(1);
        Self { n, k, offset: offset.repeat(steps + 1), gain: gain.repeat(steps + 1), domain }
    }

    pub fn steps(&self) -> usize {
        self.offset.len() / self.k - 1
    }

    pub fn parameters(&self) -> usize {
        self.offset.len() + self.gain.len()
    }
}

impl FeedbackMap for AffineFeedback {
    fn eval(&self, step: usize, _t: f64, x: &[f64], out: &mut [f64]) {
        let (n, k) = (self.n, self.k);
        for r in 0..k {
            let g = &self.gain[(step * k + r) * n..(step * k + r + 1) * n];
            out[r] = self.offset[step * k + r] + g.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
        if let Some(d) = &self.domain {
            d.project_in_place(out);
        }
    }
}

/// Closure-backed feedback map.
pub struct FnFeedback<F>(pub F);

impl<F> FeedbackMap for FnFeedback<F>
where
    F: Fn(usize, f64, &[f64], &mut [f64]) + Send + Sync,
{
    fn eval(&self, step: usize, t: f64, x: &[f64], out: &mut [f64]) {
        (self.0)(step, t, x, out)
    }
}

/// Solution of the state equation on a path batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardBatch {
    pub paths: usize,
    pub steps: usize,
    pub n: usize,
    pub k: usize,
    /// `M x (N+1) x n`.
    pub states: Vec<f64>,
    /// `M x (N+1) x k`.
    pub controls: Vec<f64>,
}

impl ForwardBatch {
    /// The state array as a regression conditioning view.
    pub fn state_view(&self) -> StateView<'_> {
        StateView { paths: self.paths, steps: self.steps, dim: self.n, values: &self.states }
    }

    pub fn state(&self, path: usize, step: usize) -> &[f64] {
        let o = (path * (self.steps + 1) + step) * self.n;
        &self.states[o..o + self.n]
    }

    pub fn control(&self, path: usize, step: usize) -> &[f64] {
        let o = (path * (self.steps + 1) + step) * self.k;
        &self.controls[o..o + self.k]
    }

    pub fn control_table(&self) -> ControlTable {
        ControlTable { paths: self.paths, steps: self.steps, k: self.k, values: self.controls.clone() }
    }

    pub fn subset(&self, range: std::ops::Range<usize>) -> Self {
        let ws = (self.steps + 1) * self.n;
        let wc = (self.steps + 1) * self.k;
        Self {
            paths: range.len(),
            steps: self.steps,
            n: self.n,
            k: self.k,
            states: self.states[range.start * ws..range.end * ws].to_vec(),
            controls: self.controls[range.start * wc..range.end * wc].to_vec(),
        }
    }
}

/// First-order variation `X_1` and the perturbation `u - u_bar` that drives it.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalForwardBatch {
    pub paths: usize,
    pub steps: usize,
    pub n: usize,
    pub states: Vec<f64>,
    pub perturbation: ControlTable,
}

impl VariationalForwardBatch {
    pub fn state_view(&self) -> StateView<'_> {
        StateView { paths: self.paths, steps: self.steps, dim: self.n, values: &self.states }
    }

    pub fn state(&self, path: usize, step: usize) -> &[f64] {
        let o = (path * (self.steps + 1) + step) * self.n;
        &self.states[o..o + self.n]
    }
}

fn check_noise(spec: &ProblemSpec, grid: &TimeGrid, noise: &BrownianBatch) -> Result<()> {
    if noise.steps != grid.steps || noise.dim != spec.dims.d {
        return Err(Error::Dimension(format!(
            "noise is {}x{} (steps x d), grid/spec need {}x{}",
            noise.steps, noise.dim, grid.steps, spec.dims.d
        )));
    }
    Ok(())
}

fn check_table(t: &ControlTable, paths: usize, steps: usize, k: usize) -> Result<()> {
    if t.paths != paths || t.steps != steps || t.k != k {
        return Err(Error::Dimension(format!(
            "control table is {}x{}x{}, expected {paths}x{}x{k}",
            t.paths,
            t.steps + 1,
            t.k,
            steps + 1
        )));
    }
    Ok(())
}

/// Returns the first error by path order so that failures are reported
/// deterministically.
fn first_error(results: Vec<Result<()>>) -> Result<()> {
    results.into_iter().collect::<Result<Vec<()>>>().map(|_| ())
}

/// Euler–Maruyama: `X_{i+1} = X_i + b(t_i, X_i, u_i) dt + sigma(t_i, X_i, u_i) dW_i`.
pub fn solve_forward_sde(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    noise: &BrownianBatch,
    control: &Control,
) -> Result<ForwardBatch> {
    check_noise(spec, grid, noise)?;
    let Dims { n, d, k } = spec.dims;
    let m = noise.paths;
    let steps = grid.steps;
    if let Control::OpenLoop(t) = control {
        check_table(t, m, steps, k)?;
    }
    let ws = (steps + 1) * n;
    let wc = (steps + 1) * k;
    let mut states = vec![0.0; m * ws];
    let mut controls = vec![0.0; m * wc];
    let coeffs = spec.coeffs.as_ref();
    let results: Vec<Result<()>> = states
        .par_chunks_mut(ws * PATH_CHUNK)
        .zip(controls.par_chunks_mut(wc * PATH_CHUNK))
        .enumerate()
        .map(|(c, (sblock, cblock))| {
            let mut b = vec![0.0; n];
            let mut sig = vec![0.0; n * d];
            for (j, (xs, us)) in sblock.chunks_exact_mut(ws).zip(cblock.chunks_exact_mut(wc)).enumerate() {
                let path = c * PATH_CHUNK + j;
                xs[..n].copy_from_slice(&spec.x0);
                for i in 0..=steps {
                    let t = grid.times[i];
                    let (done, rest) = xs.split_at_mut((i + 1) * n);
                    let x = &done[i * n..];
                    let u = &mut us[i * k..(i + 1) * k];
                    match control {
                        Control::Feedback(f) => f.eval(i, t, x, u),
                        Control::OpenLoop(tab) => u.copy_from_slice(tab.at(path, i)),
                    }
                    if u.iter().any(|v| !v.is_finite()) {
                        return Err(Error::NonFinite { what: "control", t });
                    }
                    if i == steps {
                        break;
                    }
                    coeffs.drift(t, x, u, &mut b);
                    coeffs.diffusion(t, x, u, &mut sig);
                    let dw = noise.increment(path, i);
                    let next = &mut rest[..n];
                    let mut norm2 = 0.0;
                    for r in 0..n {
                        let mut v = x[r] + b[r] * grid.dt;
                        for (s, w) in sig[r * d..(r + 1) * d].iter().zip(dw) {
                            v += s * w;
                        }
                        next[r] = v;
                        norm2 += v * v;
                    }
                    let norm = norm2.sqrt();
                    if !norm.is_finite() || norm > EXPLOSION_BOUND {
                        return Err(Error::Explosion { step: i + 1, norm });
                    }
                }
            }
            Ok(())
        })
        .collect();
    first_error(results)?;
    Ok(ForwardBatch { paths: m, steps, n, k, states, controls })
}

/// Realizes `u - u_bar` along the base trajectory: feedback maps are
/// evaluated at `(t_i, X_bar_i)`; the result is an open-loop table.
pub fn realize_perturbation(base: &ForwardBatch, grid: &TimeGrid, u: &Control) -> Result<ControlTable> {
    let (m, steps, n, k) = (base.paths, base.steps, base.n, base.k);
    let mut table = ControlTable::zeros(m, steps, k);
    if let Control::OpenLoop(t) = u {
        check_table(t, m, steps, k)?;
    }
    let wc = (steps + 1) * k;
    table.values.par_chunks_mut(wc * PATH_CHUNK).enumerate().for_each(|(c, block)| {
        for (j, row) in block.chunks_exact_mut(wc).enumerate() {
            let path = c * PATH_CHUNK + j;
            for i in 0..=steps {
                let out = &mut row[i * k..(i + 1) * k];
                match u {
                    Control::Feedback(f) => f.eval(i, grid.times[i], base.state(path, i), out),
                    Control::OpenLoop(t) => out.copy_from_slice(t.at(path, i)),
                }
                for (o, ub) in out.iter_mut().zip(base.control(path, i)) {
                    *o -= ub;
                }
            }
        }
    });
    let _ = n;
    Ok(table)
}

/// Open-loop table `u_bar + eps * uhat`.
pub fn convex_perturbation(base: &ForwardBatch, uhat: &ControlTable, eps: f64) -> ControlTable {
    let values = base.controls.iter().zip(&uhat.values).map(|(u, h)| u + eps * h).collect();
    ControlTable { paths: base.paths, steps: base.steps, k: base.k, values }
}

/// Euler scheme for the variational equation with coefficients evaluated
/// along `(t_i, X_bar_i, u_bar_i)`.
pub fn solve_variational_sde(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    noise: &BrownianBatch,
    base: &ForwardBatch,
    uhat: &ControlTable,
) -> Result<VariationalForwardBatch> {
    check_noise(spec, grid, noise)?;
    let Dims { n, d, k } = spec.dims;
    let m = noise.paths;
    let steps = grid.steps;
    if base.paths != m || base.steps != steps {
        return Err(Error::Dimension("base trajectory does not match the noise batch".into()));
    }
    check_table(uhat, m, steps, k)?;
    let ws = (steps + 1) * n;
    let mut states = vec![0.0; m * ws];
    let coeffs = spec.coeffs.as_ref();
    let results: Vec<Result<()>> = states
        .par_chunks_mut(ws * PATH_CHUNK)
        .enumerate()
        .map(|(c, block)| {
            let mut bx = vec![0.0; n * n];
            let mut bu = vec![0.0; n * k];
            let mut sx = vec![0.0; d * n * n];
            let mut su = vec![0.0; d * n * k];
            for (j, xs) in block.chunks_exact_mut(ws).enumerate() {
                let path = c * PATH_CHUNK + j;
                for i in 0..steps {
                    let t = grid.times[i];
                    let xb = base.state(path, i);
                    let ub = base.control(path, i);
                    let uh = uhat.at(path, i);
                    coeffs.drift_x(t, xb, ub, &mut bx);
                    coeffs.drift_u(t, xb, ub, &mut bu);
                    coeffs.diffusion_x(t, xb, ub, &mut sx);
                    coeffs.diffusion_u(t, xb, ub, &mut su);
                    let dw = noise.increment(path, i);
                    let (done, rest) = xs.split_at_mut((i + 1) * n);
                    let x1 = &done[i * n..];
                    let mut norm2 = 0.0;
                    for r in 0..n {
                        let mut drift = 0.0;
                        for c2 in 0..n {
                            drift += bx[r * n + c2] * x1[c2];
                        }
                        for c2 in 0..k {
                            drift += bu[r * k + c2] * uh[c2];
                        }
                        let mut v = x1[r] + drift * grid.dt;
                        for (jj, w) in dw.iter().enumerate() {
                            let mut s = 0.0;
                            for c2 in 0..n {
                                s += sx[(jj * n + r) * n + c2] * x1[c2];
                            }
                            for c2 in 0..k {
                                s += su[(jj * n + r) * k + c2] * uh[c2];
                            }
                            v += s * w;
                        }
                        rest[r] = v;
                        norm2 += v * v;
                    }
                    let norm = norm2.sqrt();
                    if !norm.is_finite() || norm > EXPLOSION_BOUND {
                        return Err(Error::Explosion { step: i + 1, norm });
                    }
                }
            }
            Ok(())
        })
        .collect();
    first_error(results)?;
    Ok(VariationalForwardBatch { paths: m, steps, n, states, perturbation: uhat.clone() })
}

/// Log-log slope verdict; series below the round-off floor are reported as
/// exact rather than fitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum RateFit {
    Fitted(SlopeFit),
    /// Every error is below the round-off floor: no slope to fit.
    BelowFloor {
        max_error: f64,
        floor: f64,
    },
}

impl RateFit {
    pub fn slope(&self) -> Option<f64> {
        match self {
            RateFit::Fitted(s) => Some(s.slope),
            RateFit::BelowFloor { .. } => None,
        }
    }

    pub fn is_inconclusive(&self) -> bool {
        matches!(self, RateFit::BelowFloor { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub epsilons: Vec<f64>,
    /// `E[sup_i |V^eps_i - V_bar_i|^2]` per epsilon.
    pub first_order: Vec<f64>,
    /// `E[sup_i |V^eps_i - V_bar_i - eps V_1,i|^2]` per epsilon.
    pub remainder: Vec<f64>,
    pub first_order_fit: RateFit,
    pub remainder_fit: RateFit,
}

/// Relative round-off level below which a squared error carries no signal.
pub const ROUNDOFF_REL: f64 = 1e-12;

/// Fits both series; `scale` is the squared magnitude of the reference
/// process, used to place the round-off floor.
pub fn rate_report(epsilons: &[f64], first_order: Vec<f64>, remainder: Vec<f64>, scale: f64) -> Result<RateReport> {
    let floor = (ROUNDOFF_REL * ROUNDOFF_REL) * scale.max(1.0);
    let fit = |v: &[f64]| -> Result<RateFit> {
        let max_error = v.iter().cloned().fold(0.0, f64::max);
        if max_error <= floor {
            Ok(RateFit::BelowFloor { max_error, floor })
        } else {
            Ok(RateFit::Fitted(fit_log2_slope(epsilons, v)?))
        }
    };
    Ok(RateReport {
        epsilons: epsilons.to_vec(),
        first_order_fit: fit(&first_order)?,
        remainder_fit: fit(&remainder)?,
        first_order,
        remainder,
    })
}

pub(crate) fn validate_epsilons(epsilons: &[f64]) -> Result<()> {
    if epsilons.len() < 4 {
        return Err(Error::InvalidProblem("rate checks need at least 4 epsilons".into()));
    }
    if epsilons.iter().any(|e| !(*e > 0.0 && *e <= 1.0)) {
        return Err(Error::InvalidProblem("epsilons must lie in (0, 1]".into()));
    }
    Ok(())
}

/// Mean over paths of `sup_i |a_i - b_i - c * v_i|^2` on `n`-vectors.
pub(crate) fn mean_sup_sq(a: &[f64], b: &[f64], v: Option<(&[f64], f64)>, paths: usize, width: usize, n: usize) -> f64 {
    let per_path: Vec<f64> = (0..paths)
        .into_par_iter()
        .with_min_len(PATH_CHUNK)
        .map(|p| {
            let o = p * width;
            let mut sup = 0.0f64;
            for i in 0..width / n {
                let mut s = 0.0;
                for r in 0..n {
                    let idx = o + i * n + r;
                    let mut e = a[idx] - b[idx];
                    if let Some((vv, c)) = v {
                        e -= c * vv[idx];
                    }
                    s += e * e;
                }
                sup = sup.max(s);
            }
            sup
        })
        .collect();
    crate::regression::det_sum(&per_path) / paths as f64
}

/// Common-noise first-order expansion check of the state process along
/// `u^eps = u_bar + eps (u - u_bar)`.
pub fn expansion_rate_check(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    noise: &BrownianBatch,
    u_bar: &Control,
    u: &Control,
    epsilons: &[f64],
) -> Result<RateReport> {
    validate_epsilons(epsilons)?;
    let base = solve_forward_sde(spec, grid, noise, u_bar)?;
    let uhat = realize_perturbation(&base, grid, u)?;
    let var = solve_variational_sde(spec, grid, noise, &base, &uhat)?;
    let width = (grid.steps + 1) * spec.dims.n;
    let scale = mean_sup_sq(&base.states, &vec![0.0; base.states.len()], None, base.paths, width, spec.dims.n);
    let mut first = Vec::new();
    let mut rem = Vec::new();
    for &eps in epsilons {
        let table = convex_perturbation(&base, &uhat, eps);
        let pert = solve_forward_sde(spec, grid, noise, &Control::OpenLoop(Arc::new(table)))?;
        first.push(mean_sup_sq(&pert.states, &base.states, None, base.paths, width, spec.dims.n));
        rem.push(mean_sup_sq(&pert.states, &base.states, Some((&var.states, eps)), base.paths, width, spec.dims.n));
    }
    rate_report(epsilons, first, rem, scale)
}
