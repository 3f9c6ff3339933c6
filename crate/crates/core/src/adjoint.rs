//! Adjoint processes, the auxiliary equation, the weight process `Gamma`, the
//! Hamiltonian and the decoupling relation between the variational BSDE and
//! the adjoint.
//!
//! The adjoint is discretized so that it linearizes the backward scheme of
//! [`crate::bsde`] exactly: with `Ep = E[p_{i+1}|F_i]` and
//! `q^j = E[p_{i+1} dW^j|F_i] / dt`,
//!
//! ```text
//! (1 - f_y dt) p_i = Ep + dt (b_x' Ep + sum_j sigma_x^j' (q^j + f_zj Ep) + f_zj q^j + f_x).
//! ```
//!
//! The control gradient along the trajectory is the Hamiltonian gradient
//! evaluated with `p = Ep`:
//! `g = b_u' Ep + sum_j sigma_u^j' q^j + f_u + sum_j f_zj sigma_u^j' Ep`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bmo::exponential_weights;
use crate::bsde::{solve_linear_bsde_with, BackwardSolution, BsdeOptions, Conditioning, LinearBsdeData};
use crate::error::{Error, Result};
use crate::model::{DerivativeBuffers, Dims, ProblemSpec};
use crate::paths::{BrownianBatch, ControlTable, ForwardBatch, TimeGrid, VariationalForwardBatch, PATH_CHUNK};
use crate::regression::{default_ridge, Design, RegressionBasis, StepFit};
use crate::stats::{Estimate, ResidualStats};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdjointSolution {
    pub paths: usize,
    pub steps: usize,
    pub n: usize,
    pub d: usize,
    /// `M x (N+1) x n`.
    pub p: Vec<f64>,
    /// `E[p_{i+1} | F_i]`, `M x N x n`.
    pub ep: Vec<f64>,
    /// `M x (N+1) x n x d`, entry `(r, j)` of `q_i` at `r * d + j`; column
    /// `j` is `q^j`. The last time slot is zero.
    pub q: Vec<f64>,
    /// Per step `0..N`: outputs `[Ep_1, .., Ep_n, q_(1,1), .., q_(n,d)]`.
    pub fits: Vec<StepFit>,
}

impl AdjointSolution {
    pub fn p_at(&self, path: usize, step: usize) -> &[f64] {
        let o = (path * (self.steps + 1) + step) * self.n;
        &self.p[o..o + self.n]
    }

    pub fn ep_at(&self, path: usize, step: usize) -> &[f64] {
        let o = (path * self.steps + step) * self.n;
        &self.ep[o..o + self.n]
    }

    pub fn q_at(&self, path: usize, step: usize) -> &[f64] {
        let w = self.n * self.d;
        let o = (path * (self.steps + 1) + step) * w;
        &self.q[o..o + w]
    }
}

fn check_inputs(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    noise: &BrownianBatch,
    forward: &ForwardBatch,
    backward: &BackwardSolution,
) -> Result<()> {
    let m = noise.paths;
    if noise.steps != grid.steps
        || noise.dim != spec.dims.d
        || forward.paths != m
        || forward.steps != grid.steps
        || backward.paths != m
        || backward.steps != grid.steps
        || backward.d != spec.dims.d
    {
        return Err(Error::Dimension("adjoint inputs disagree on M, N or d".into()));
    }
    Ok(())
}

/// Adjoint conditioned on the forward state with a polynomial basis of
/// `opts.degree`.
pub fn solve_adjoint(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    noise: &BrownianBatch,
    forward: &ForwardBatch,
    backward: &BackwardSolution,
    opts: &BsdeOptions,
) -> Result<AdjointSolution> {
    let basis = RegressionBasis::polynomial(spec.dims.n, opts.degree);
    let cond = Conditioning::new(forward.state_view(), &basis)?;
    solve_adjoint_with(spec, grid, noise, forward, backward, cond, opts)
}

pub fn solve_adjoint_with(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    noise: &BrownianBatch,
    forward: &ForwardBatch,
    backward: &BackwardSolution,
    cond: Conditioning<'_>,
    opts: &BsdeOptions,
) -> Result<AdjointSolution> {
    check_inputs(spec, grid, noise, forward, backward)?;
    let Dims { n, d, .. } = spec.dims;
    let m = noise.paths;
    let steps = grid.steps;
    let dt = grid.dt;
    let w = steps + 1;
    let c = spec.coeffs.as_ref();
    let mut p = vec![0.0; m * w * n];
    let mut ep = vec![0.0; m * steps * n];
    let mut q = vec![0.0; m * w * n * d];
    {
        let mut buf = vec![0.0; n];
        for path in 0..m {
            c.terminal_x(forward.state(path, steps), &mut buf);
            if buf.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { what: "terminal_x", t: grid.horizon });
            }
            p[(path * w + steps) * n..(path * w + steps + 1) * n].copy_from_slice(&buf);
        }
    }
    let ridge = opts.ridge.unwrap_or_else(|| default_ridge(m));
    let mut pcol = vec![0.0; m * n];
    let mut qcol = vec![0.0; m * n * d];
    let mut epcol = vec![0.0; m * n];
    let mut fits = Vec::with_capacity(steps);
    for i in (0..steps).rev() {
        let st = cond.states.at_step(i);
        let design = Design::build(cond.basis, &st, m)?;
        drop(st);
        let factor = design.factor(ridge)?;
        let next: Vec<Vec<f64>> = (0..n).map(|r| (0..m).map(|path| p[(path * w + i + 1) * n + r]).collect()).collect();
        let refs: Vec<&[f64]> = next.iter().map(|v| v.as_slice()).collect();
        let (mut fit, epf) = factor.solve(&refs)?;
        let mut qt = Vec::with_capacity(n * d);
        for r in 0..n {
            for j in 0..d {
                let mut t = vec![0.0; m];
                t.par_chunks_mut(PATH_CHUNK).enumerate().for_each(|(ch, out)| {
                    for (k, o) in out.iter_mut().enumerate() {
                        let path = ch * PATH_CHUNK + k;
                        *o = (next[r][path] - epf[r][path]) * noise.increment(path, i)[j] / dt;
                    }
                });
                qt.push(t);
            }
        }
        drop(next);
        let refs: Vec<&[f64]> = qt.iter().map(|v| v.as_slice()).collect();
        let (qfit, qf) = factor.solve(&refs)?;
        drop(qt);
        fit.coefficients.extend(qfit.coefficients);
        fits.push(fit);

        let t = grid.times[i];
        let results: Vec<Result<()>> = pcol
            .par_chunks_mut(PATH_CHUNK * n)
            .zip(qcol.par_chunks_mut(PATH_CHUNK * n * d))
            .zip(epcol.par_chunks_mut(PATH_CHUNK * n))
            .enumerate()
            .map(|(ch, ((pc, qc), ec))| {
                let mut der = DerivativeBuffers::new(spec.dims);
                let mut acc = vec![0.0; n];
                let mut tmp = vec![0.0; n];
                for (k, ((pv, qv), ev)) in
                    pc.chunks_exact_mut(n).zip(qc.chunks_exact_mut(n * d)).zip(ec.chunks_exact_mut(n)).enumerate()
                {
                    let path = ch * PATH_CHUNK + k;
                    for r in 0..n {
                        ev[r] = epf[r][path];
                        for j in 0..d {
                            qv[r * d + j] = qf[r * d + j][path];
                        }
                    }
                    der.evaluate(
                        c,
                        t,
                        forward.state(path, i),
                        backward.y_at(path, i),
                        backward.z_at(path, i),
                        forward.control(path, i),
                    );
                    let denom = 1.0 - der.f_y * dt;
                    if !(denom > 0.0) {
                        return Err(Error::InvalidProblem(format!("f_y dt = {} >= 1 at step {i}", der.f_y * dt)));
                    }
                    // acc = b_x' Ep + f_x
                    for col in 0..n {
                        let mut s = der.f_x[col];
                        for r in 0..n {
                            s += der.b_x[r * n + col] * ev[r];
                        }
                        acc[col] = s;
                    }
                    for j in 0..d {
                        let fz = der.f_z[j];
                        for r in 0..n {
                            tmp[r] = qv[r * d + j] + fz * ev[r];
                            acc[r] += fz * qv[r * d + j];
                        }
                        for col in 0..n {
                            let mut s = 0.0;
                            for r in 0..n {
                                s += der.sigma_x[(j * n + r) * n + col] * tmp[r];
                            }
                            acc[col] += s;
                        }
                    }
                    for r in 0..n {
                        pv[r] = (ev[r] + dt * acc[r]) / denom;
                        if !pv[r].is_finite() {
                            return Err(Error::NonFinite { what: "adjoint p", t });
                        }
                    }
                }
                Ok(())
            })
            .collect();
        results.into_iter().collect::<Result<Vec<()>>>()?;
        for path in 0..m {
            p[(path * w + i) * n..(path * w + i + 1) * n].copy_from_slice(&pcol[path * n..(path + 1) * n]);
            ep[(path * steps + i) * n..(path * steps + i + 1) * n].copy_from_slice(&epcol[path * n..(path + 1) * n]);
            q[(path * w + i) * n * d..(path * w + i + 1) * n * d]
                .copy_from_slice(&qcol[path * n * d..(path + 1) * n * d]);
        }
    }
    fits.reverse();
    Ok(AdjointSolution { paths: m, steps, n, d, p, ep, q, fits })
}

/// Control gradient `H_u` along the trajectory, `M x N x k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientField {
    pub paths: usize,
    pub steps: usize,
    pub k: usize,
    pub values: Vec<f64>,
}

impl GradientField {
    pub fn at(&self, path: usize, step: usize) -> &[f64] {
        let o = (path * self.steps + step) * self.k;
        &self.values[o..o + self.k]
    }
}

/// `g = b_u' p + sum_j sigma_u^j' q^j + f_u + sum_j f_zj sigma_u^j' p` with
/// `p` the given `n`-vector; the derivatives are read from `der`.
fn control_gradient(der: &DerivativeBuffers, dims: Dims, p: &[f64], q: &[f64], out: &mut [f64]) {
    let Dims { n, d, k } = dims;
    for l in 0..k {
        let mut s = der.f_u[l];
        for r in 0..n {
            s += der.b_u[r * k + l] * p[r];
        }
        for j in 0..d {
            let fz = der.f_z[j];
            for r in 0..n {
                s += der.sigma_u[(j * n + r) * k + l] * (q[r * d + j] + fz * p[r]);
            }
        }
        out[l] = s;
    }
}

pub fn gradient_field(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    forward: &ForwardBatch,
    backward: &BackwardSolution,
    adjoint: &AdjointSolution,
) -> Result<GradientField> {
    let Dims { k, .. } = spec.dims;
    let (m, steps) = (forward.paths, grid.steps);
    if adjoint.paths != m || adjoint.steps != steps || backward.paths != m {
        return Err(Error::Dimension("gradient field inputs disagree on M or N".into()));
    }
    let c = spec.coeffs.as_ref();
    let mut values = vec![0.0; m * steps * k];
    values.par_chunks_mut(steps * k).enumerate().for_each(|(path, row)| {
        let mut der = DerivativeBuffers::new(spec.dims);
        for i in 0..steps {
            der.evaluate(
                c,
                grid.times[i],
                forward.state(path, i),
                backward.y_at(path, i),
                backward.z_at(path, i),
                forward.control(path, i),
            );
            control_gradient(
                &der,
                spec.dims,
                adjoint.ep_at(path, i),
                adjoint.q_at(path, i),
                &mut row[i * k..(i + 1) * k],
            );
        }
    });
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { what: "control gradient", t: f64::NAN });
    }
    Ok(GradientField { paths: m, steps, k, values })
}

/// `H_u` at step `i` and an arbitrary state, from the regression fits of
/// the backward and adjoint solutions. Both must condition on the forward
/// state alone. `Y` is taken as `E[Y_{i+1}|x] + f dt` with `Z` truncated as
/// in the solver.
#[allow(clippy::too_many_arguments)]
pub fn gradient_at(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    backward: &BackwardSolution,
    adjoint: &AdjointSolution,
    step: usize,
    x: &[f64],
    u: &[f64],
    out: &mut [f64],
) {
    let Dims { n, d, .. } = spec.dims;
    let bf = &backward.fits[step];
    let af = &adjoint.fits[step];
    let cy = bf.eval(0, x);
    let mut z: Vec<f64> = (0..d).map(|j| bf.eval(1 + j, x)).collect();
    let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > backward.truncation_radius {
        let s = backward.truncation_radius / norm;
        z.iter_mut().for_each(|v| *v *= s);
    }
    let t = grid.times[step];
    let c = spec.coeffs.as_ref();
    let y = cy + grid.dt * c.generator(t, x, cy, &z, u);
    let ep: Vec<f64> = (0..n).map(|r| af.eval(r, x)).collect();
    let q: Vec<f64> = (0..n * d).map(|r| af.eval(n + r, x)).collect();
    let mut der = DerivativeBuffers::new(spec.dims);
    der.evaluate(c, t, x, y, &z, u);
    control_gradient(&der, spec.dims, &ep, &q, out);
}

/// `f_y` (`M x N`) and `f_z` (`M x N x d`) along the trajectory.
fn generator_sensitivities(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    forward: &ForwardBatch,
    backward: &BackwardSolution,
) -> (Vec<f64>, Vec<f64>) {
    let Dims { d, .. } = spec.dims;
    let (m, steps) = (forward.paths, grid.steps);
    let c = spec.coeffs.as_ref();
    let mut fy = vec![0.0; m * steps];
    let mut fz = vec![0.0; m * steps * d];
    fy.par_chunks_mut(steps).zip(fz.par_chunks_mut(steps * d)).enumerate().for_each(|(path, (ry, rz))| {
        for i in 0..steps {
            let (t, x, y, z, u) = (
                grid.times[i],
                forward.state(path, i),
                backward.y_at(path, i),
                backward.z_at(path, i),
                forward.control(path, i),
            );
            ry[i] = c.generator_y(t, x, y, z, u);
            c.generator_z(t, x, y, z, u, &mut rz[i * d..(i + 1) * d]);
        }
    });
    (fy, fz)
}

fn lambda_bound(fy: &[f64], spec: &ProblemSpec) -> f64 {
    fy.iter().fold(spec.constants.f_y_sup, |a, v| a.max(v.abs()))
}

/// `Gamma_t = exp(int f_y) E(int f_z dW)` on the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaPath {
    pub paths: usize,
    pub steps: usize,
    /// `M x (N+1)`.
    pub values: Vec<f64>,
}

impl GammaPath {
    pub fn at(&self, path: usize, step: usize) -> f64 {
        self.values[path * (self.steps + 1) + step]
    }
}

pub fn gamma_process(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    noise: &BrownianBatch,
    forward: &ForwardBatch,
    backward: &BackwardSolution,
) -> Result<GammaPath> {
    check_inputs(spec, grid, noise, forward, backward)?;
    let (fy, fz) = generator_sensitivities(spec, grid, forward, backward);
    let values = exponential_weights(Some(&fy), &fz, noise)?;
    Ok(GammaPath { paths: noise.paths, steps: grid.steps, values })
}

/// Data of the auxiliary BSDE: zero terminal value, `lambda = f_y`,
/// `mu = f_z`, `phi = g . uhat`.
pub fn auxiliary_data(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    forward: &ForwardBatch,
    backward: &BackwardSolution,
    gradient: &GradientField,
    uhat: &ControlTable,
) -> Result<LinearBsdeData> {
    let Dims { d, k, .. } = spec.dims;
    let (m, steps) = (forward.paths, grid.steps);
    if uhat.paths != m || uhat.steps != steps || uhat.k != k {
        return Err(Error::Dimension("perturbation table does not match the trajectory".into()));
    }
    let (fy, fz) = generator_sensitivities(spec, grid, forward, backward);
    let mut phi = vec![0.0; m * steps];
    phi.par_chunks_mut(steps).enumerate().for_each(|(path, row)| {
        for (i, v) in row.iter_mut().enumerate() {
            *v = gradient.at(path, i).iter().zip(uhat.at(path, i)).map(|(a, b)| a * b).sum();
        }
    });
    let lb = lambda_bound(&fy, spec);
    Ok(LinearBsdeData { paths: m, steps, d, xi: vec![0.0; m], lambda: fy, mu: fz, phi, lambda_bound: lb })
}

/// Solves the auxiliary equation for `(Y_hat, Z_hat)`.
#[allow(clippy::too_many_arguments)]
pub fn solve_auxiliary(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    noise: &BrownianBatch,
    forward: &ForwardBatch,
    backward: &BackwardSolution,
    gradient: &GradientField,
    uhat: &ControlTable,
    cond: Conditioning<'_>,
    opts: &BsdeOptions,
) -> Result<BackwardSolution> {
    let data = auxiliary_data(spec, grid, forward, backward, gradient, uhat)?;
    solve_linear_bsde_with(&data, grid, noise, cond, opts)
}

/// Data of the variational BSDE: terminal `Phi_x(X_T)' X1_T`,
/// `lambda = f_y`, `mu = f_z`, `phi = f_x' X1 + f_u' uhat`.
pub fn variational_bsde_data(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    forward: &ForwardBatch,
    backward: &BackwardSolution,
    variational: &VariationalForwardBatch,
) -> Result<LinearBsdeData> {
    let Dims { n, d, k } = spec.dims;
    let (m, steps) = (forward.paths, grid.steps);
    if variational.paths != m || variational.steps != steps {
        return Err(Error::Dimension("variational batch does not match the trajectory".into()));
    }
    let c = spec.coeffs.as_ref();
    let (fy, fz) = generator_sensitivities(spec, grid, forward, backward);
    let mut phi = vec![0.0; m * steps];
    let mut xi = vec![0.0; m];
    phi.par_chunks_mut(steps).zip(xi.par_iter_mut()).enumerate().for_each(|(path, (row, xv))| {
        let mut fx = vec![0.0; n];
        let mut fu = vec![0.0; k];
        for (i, v) in row.iter_mut().enumerate() {
            let (t, x, y, z, u) = (
                grid.times[i],
                forward.state(path, i),
                backward.y_at(path, i),
                backward.z_at(path, i),
                forward.control(path, i),
            );
            c.generator_x(t, x, y, z, u, &mut fx);
            c.generator_u(t, x, y, z, u, &mut fu);
            let x1 = variational.state(path, i);
            let uh = variational.perturbation.at(path, i);
            *v =
                fx.iter().zip(x1).map(|(a, b)| a * b).sum::<f64>() + fu.iter().zip(uh).map(|(a, b)| a * b).sum::<f64>();
        }
        c.terminal_x(forward.state(path, steps), &mut fx);
        *xv = fx.iter().zip(variational.state(path, steps)).map(|(a, b)| a * b).sum();
    });
    let lb = lambda_bound(&fy, spec);
    Ok(LinearBsdeData { paths: m, steps, d, xi, lambda: fy, mu: fz, phi, lambda_bound: lb })
}

/// `Y_hat_0 = E[sum_i Gamma_i (g_i . uhat_i) dt / (1 - f_y,i dt)]`; the
/// `1/(1 - f_y dt)` factor matches the implicit `y` step of the solvers.
pub fn yhat0_via_gamma(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    forward: &ForwardBatch,
    backward: &BackwardSolution,
    gradient: &GradientField,
    gamma: &GammaPath,
    uhat: &ControlTable,
) -> Result<Estimate> {
    let (m, steps) = (forward.paths, grid.steps);
    if gamma.paths != m || gamma.steps != steps || uhat.paths != m || gradient.paths != m {
        return Err(Error::Dimension("Gamma representation inputs disagree on M or N".into()));
    }
    let c = spec.coeffs.as_ref();
    let dt = grid.dt;
    let samples: Vec<f64> = (0..m)
        .into_par_iter()
        .with_min_len(PATH_CHUNK)
        .map(|path| {
            let mut s = 0.0;
            for i in 0..steps {
                let gu: f64 = gradient.at(path, i).iter().zip(uhat.at(path, i)).map(|(a, b)| a * b).sum();
                if gu == 0.0 {
                    continue;
                }
                let (t, x, y, z, u) = (
                    grid.times[i],
                    forward.state(path, i),
                    backward.y_at(path, i),
                    backward.z_at(path, i),
                    forward.control(path, i),
                );
                let fy = c.generator_y(t, x, y, z, u);
                s += gamma.at(path, i) * gu * dt / (1.0 - fy * dt);
            }
            s
        })
        .collect();
    Ok(Estimate::from_samples(&samples))
}

/// Arguments of the Hamiltonian; `q` is `n x d` row-major with column `j`
/// equal to `q^j`. `(x_ref, u_ref)` is the reference pair entering `Delta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HamiltonianInputs {
    pub t: f64,
    pub x: Vec<f64>,
    pub y: f64,
    pub z: Vec<f64>,
    pub u: Vec<f64>,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub x_ref: Vec<f64>,
    pub u_ref: Vec<f64>,
}

/// `Delta_j = (sigma^j(t, x, u) - sigma^j(t, x_ref, u_ref))' p`.
pub fn delta(inputs: &HamiltonianInputs, spec: &ProblemSpec) -> Vec<f64> {
    let Dims { n, d, .. } = spec.dims;
    let c = spec.coeffs.as_ref();
    let mut s = vec![0.0; n * d];
    let mut s_ref = vec![0.0; n * d];
    c.diffusion(inputs.t, &inputs.x, &inputs.u, &mut s);
    c.diffusion(inputs.t, &inputs.x_ref, &inputs.u_ref, &mut s_ref);
    (0..d).map(|j| (0..n).map(|r| (s[r * d + j] - s_ref[r * d + j]) * inputs.p[r]).sum()).collect()
}

fn shifted_z(inputs: &HamiltonianInputs, spec: &ProblemSpec) -> Vec<f64> {
    inputs.z.iter().zip(delta(inputs, spec)).map(|(a, b)| a + b).collect()
}

/// `H = p' b + sum_j q^j' sigma^j + f(t, x, y, z + Delta, u)`.
pub fn hamiltonian(inputs: &HamiltonianInputs, spec: &ProblemSpec) -> f64 {
    let Dims { n, d, .. } = spec.dims;
    let c = spec.coeffs.as_ref();
    let mut b = vec![0.0; n];
    let mut s = vec![0.0; n * d];
    c.drift(inputs.t, &inputs.x, &inputs.u, &mut b);
    c.diffusion(inputs.t, &inputs.x, &inputs.u, &mut s);
    let mut h: f64 = b.iter().zip(&inputs.p).map(|(a, p)| a * p).sum();
    for r in 0..n {
        for j in 0..d {
            h += inputs.q[r * d + j] * s[r * d + j];
        }
    }
    h + c.generator(inputs.t, &inputs.x, inputs.y, &shifted_z(inputs, spec), &inputs.u)
}

/// `H_u = b_u' p + sum_j sigma_u^j' q^j + f_u + Delta_u' f_z`, with `f_u`
/// and `f_z` taken at the shifted `z + Delta`.
pub fn hamiltonian_u(inputs: &HamiltonianInputs, spec: &ProblemSpec) -> Vec<f64> {
    let mut der = DerivativeBuffers::new(spec.dims);
    let zs = shifted_z(inputs, spec);
    der.evaluate(spec.coeffs.as_ref(), inputs.t, &inputs.x, inputs.y, &zs, &inputs.u);
    let mut out = vec![0.0; spec.dims.k];
    control_gradient(&der, spec.dims, &inputs.p, &inputs.q, &mut out);
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationReport {
    /// `|Y1 - Y_hat - p' X1|` over all paths and times.
    pub y_residual: ResidualStats,
    /// Per component `j`: `|Z1^j - Z_hat^j - p' sigma_u^j uhat - (p' sigma_x^j + q^j') X1|`
    /// over paths and steps `0..N`.
    pub z_residual: Vec<ResidualStats>,
    /// Largest `|Y1 - Y_hat - p' X1|` per grid time.
    pub y_max_by_step: Vec<f64>,
    /// `Y1_0 - Y_hat_0` (`X1_0 = 0`).
    pub t0_difference: f64,
    /// Standard error of the pathwise difference behind `t0_difference`.
    pub t0_std_error: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn check_decoupling(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    forward: &ForwardBatch,
    adjoint: &AdjointSolution,
    variational: &VariationalForwardBatch,
    var_backward: &BackwardSolution,
    auxiliary: &BackwardSolution,
    uhat: &ControlTable,
) -> Result<RelationReport> {
    let Dims { n, d, k } = spec.dims;
    let (m, steps) = (forward.paths, grid.steps);
    if [adjoint.paths, variational.paths, var_backward.paths, auxiliary.paths, uhat.paths].iter().any(|v| *v != m) {
        return Err(Error::Dimension("decoupling inputs disagree on M".into()));
    }
    let c = spec.coeffs.as_ref();
    let w = steps + 1;
    let per_path: Vec<(Vec<f64>, Vec<f64>)> = (0..m)
        .into_par_iter()
        .with_min_len(PATH_CHUNK)
        .map(|path| {
            let mut yr = vec![0.0; w];
            let mut zr = vec![0.0; steps * d];
            let mut sx = vec![0.0; d * n * n];
            let mut su = vec![0.0; d * n * k];
            for i in 0..w {
                let x1 = variational.state(path, i);
                let pv = adjoint.p_at(path, i);
                let px: f64 = pv.iter().zip(x1).map(|(a, b)| a * b).sum();
                yr[i] = (var_backward.y_at(path, i) - auxiliary.y_at(path, i) - px).abs();
                if i == steps {
                    break;
                }
                let (t, x, u) = (grid.times[i], forward.state(path, i), forward.control(path, i));
                c.diffusion_x(t, x, u, &mut sx);
                c.diffusion_u(t, x, u, &mut su);
                let q = adjoint.q_at(path, i);
                let uh = uhat.at(path, i);
                for j in 0..d {
                    let mut rel = auxiliary.z_at(path, i)[j];
                    for r in 0..n {
                        let mut sxx = 0.0;
                        for col in 0..n {
                            sxx += sx[(j * n + r) * n + col] * x1[col];
                        }
                        let mut suu = 0.0;
                        for l in 0..k {
                            suu += su[(j * n + r) * k + l] * uh[l];
                        }
                        rel += pv[r] * (sxx + suu) + q[r * d + j] * x1[r];
                    }
                    zr[i * d + j] = (var_backward.z_at(path, i)[j] - rel).abs();
                }
            }
            (yr, zr)
        })
        .collect();
    let mut y_max_by_step = vec![0.0f64; w];
    let mut yall = Vec::with_capacity(m * w);
    let mut zall: Vec<Vec<f64>> = vec![Vec::with_capacity(m * steps); d];
    for (yr, zr) in &per_path {
        for (i, v) in yr.iter().enumerate() {
            y_max_by_step[i] = y_max_by_step[i].max(*v);
        }
        yall.extend_from_slice(yr);
        for i in 0..steps {
            for j in 0..d {
                zall[j].push(zr[i * d + j]);
            }
        }
    }
    drop(per_path);
    let diff: Vec<f64> = var_backward.pathwise.iter().zip(&auxiliary.pathwise).map(|(a, b)| a - b).collect();
    let de = Estimate::from_samples(&diff);
    Ok(RelationReport {
        y_residual: ResidualStats::from_abs(&yall),
        z_residual: zall.iter().map(|v| ResidualStats::from_abs(v)).collect(),
        y_max_by_step,
        t0_difference: var_backward.y0.value - auxiliary.y0.value,
        t0_std_error: de.std_error,
    })
}
