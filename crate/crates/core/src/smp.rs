//! Cost functional, directional-derivative checks, projected gradient
//! descent over affine feedback maps and the maximum-principle check.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adjoint::{
    gamma_process, gradient_at, gradient_field, solve_adjoint, solve_auxiliary, variational_bsde_data, yhat0_via_gamma,
    AdjointSolution, GammaPath, GradientField,
};
use crate::bsde::{
    solve_linear_bsde_with, solve_quadratic_bsde, solve_quadratic_bsde_with, BackwardSolution, BsdeOptions,
    Conditioning,
};
use crate::error::{Error, Result};
use crate::model::{ControlDomain, Dims, ProblemSpec};
use crate::paths::{
    convex_perturbation, mean_sup_sq, rate_report, realize_perturbation, solve_forward_sde, solve_variational_sde,
    validate_epsilons, AffineFeedback, BrownianBatch, Control, ControlTable, ForwardBatch, RateReport, TimeGrid,
    VariationalForwardBatch,
};
use crate::regression::{default_ridge, regress_conditional_expectation, RegressionBasis, RegressionStates};
use crate::stats::{combined_se, intercept_weights, Estimate};

/// Default `eps` schedule `2^-2 .. 2^-6`.
pub const DEFAULT_EPSILONS: [f64; 5] = [0.25, 0.125, 0.0625, 0.03125, 0.015625];

/// `J(u) = Y_0^u`: forward solve, then the quadratic backward solve.
pub fn cost_functional(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    noise: &BrownianBatch,
    control: &Control,
    opts: &BsdeOptions,
) -> Result<Estimate> {
    let fwd = solve_forward_sde(spec, grid, noise, control)?;
    Ok(solve_quadratic_bsde(spec, grid, noise, &fwd, opts)?.y0)
}

/// Everything solved along a candidate control.
pub struct Candidate {
    pub forward: ForwardBatch,
    pub backward: BackwardSolution,
    pub adjoint: AdjointSolution,
    pub gradient: GradientField,
    pub gamma: GammaPath,
}

pub fn solve_candidate(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    noise: &BrownianBatch,
    control: &Control,
    opts: &BsdeOptions,
) -> Result<Candidate> {
    let forward = solve_forward_sde(spec, grid, noise, control)?;
    let backward = solve_quadratic_bsde(spec, grid, noise, &forward, opts)?;
    let adjoint = solve_adjoint(spec, grid, noise, &forward, &backward, opts)?;
    let gradient = gradient_field(spec, grid, &forward, &backward, &adjoint)?;
    let gamma = gamma_process(spec, grid, noise, &forward, &backward)?;
    Ok(Candidate { forward, backward, adjoint, gradient, gamma })
}

/// Basis for processes of a perturbed problem, conditioned on
/// `(X_bar, D)` with `D` the scaled deviation from the base state: a
/// polynomial in `X_bar` times `(1, D)`.
pub fn perturbed_basis(n: usize, degree: usize) -> RegressionBasis {
    RegressionBasis::polynomial(n, degree).with_affine_tail(n)
}

/// Conditioning state `(X_bar, (X_eps - X_bar) / eps)`.
pub fn perturbed_states(base: &ForwardBatch, perturbed: &ForwardBatch, eps: f64) -> Result<RegressionStates> {
    let dev: Vec<f64> = perturbed.states.par_iter().zip(&base.states).map(|(a, b)| (a - b) / eps).collect();
    RegressionStates::concat(base.paths, base.steps, &base.states, base.n, &dev, base.n)
}

/// Conditioning state `(X_bar, X_1)`.
pub fn variational_states(base: &ForwardBatch, var: &VariationalForwardBatch) -> Result<RegressionStates> {
    RegressionStates::concat(base.paths, base.steps, &base.states, base.n, &var.states, base.n)
}

fn solve_perturbed(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    noise: &BrownianBatch,
    base: &ForwardBatch,
    uhat: &ControlTable,
    eps: f64,
    basis: &RegressionBasis,
    opts: &BsdeOptions,
) -> Result<BackwardSolution> {
    let table = convex_perturbation(base, uhat, eps);
    let fwd = solve_forward_sde(spec, grid, noise, &Control::OpenLoop(Arc::new(table)))?;
    let states = perturbed_states(base, &fwd, eps)?;
    let cond = Conditioning::new(states.view(), basis)?;
    solve_quadratic_bsde_with(spec, grid, noise, &fwd, cond, opts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Pass,
    Fail,
    /// The statistical error is too large to resolve the compared values.
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateauxOptions {
    pub bsde: BsdeOptions,
    /// Degree of the least-squares polynomial in `eps` used for extrapolation.
    pub fit_degree: usize,
    /// Agreement threshold in combined standard errors.
    pub sigmas: f64,
}

impl Default for GateauxOptions {
    fn default() -> Self {
        Self { bsde: BsdeOptions::default(), fit_degree: 2, sigmas: 3.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientCheckReport {
    pub epsilons: Vec<f64>,
    /// `(J(u_eps) - J(u_bar)) / eps`.
    pub fd_slopes: Vec<f64>,
    /// Common-noise standard errors of the quotients.
    pub fd_std_errors: Vec<f64>,
    pub cost: Estimate,
    /// From the auxiliary BSDE.
    pub yhat0: Estimate,
    /// From the `Gamma` representation.
    pub yhat0_gamma: Estimate,
    pub extrapolated_intercept: Estimate,
    pub combined_std_error: f64,
    pub verdict: Verdict,
    pub cross_method_difference: f64,
    pub cross_method_std_error: f64,
    pub cross_method_verdict: Verdict,
}

impl GradientCheckReport {
    /// `eps,fd_slope,std_error`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("eps,fd_slope,std_error\n");
        for ((e, v), se) in self.epsilons.iter().zip(&self.fd_slopes).zip(&self.fd_std_errors) {
            s.push_str(&format!("{e:e},{v:e},{se:e}\n"));
        }
        s
    }
}

fn verdict(diff: f64, se: f64, scale: f64, sigmas: f64) -> Verdict {
    if se > 0.0 && se > 0.5 * scale {
        Verdict::Inconclusive
    } else if diff.abs() <= sigmas * se + 1e-12 * (1.0 + scale) {
        Verdict::Pass
    } else {
        Verdict::Fail
    }
}

/// Common-noise difference quotients of `J` along `u_eps = u_bar + eps (u - u_bar)`
/// against `Y_hat_0`, with a Richardson-type intercept (least-squares
/// polynomial in `eps` evaluated at 0). Standard errors of the quotients and
/// the intercept come from their pathwise representations, so the
/// correlation induced by the shared noise is accounted for.
pub fn gateaux_check(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    noise: &BrownianBatch,
    u_bar: &Control,
    u: &Control,
    epsilons: &[f64],
    opts: &GateauxOptions,
) -> Result<GradientCheckReport> {
    validate_epsilons(epsilons)?;
    let n = spec.dims.n;
    let cand = solve_candidate(spec, grid, noise, u_bar, &opts.bsde)?;
    let uhat = realize_perturbation(&cand.forward, grid, u)?;
    let base_basis = RegressionBasis::polynomial(n, opts.bsde.degree);
    let cond = Conditioning::new(cand.forward.state_view(), &base_basis)?;
    let aux =
        solve_auxiliary(spec, grid, noise, &cand.forward, &cand.backward, &cand.gradient, &uhat, cond, &opts.bsde)?;
    let yg = yhat0_via_gamma(spec, grid, &cand.forward, &cand.backward, &cand.gradient, &cand.gamma, &uhat)?;

    let basis = perturbed_basis(n, opts.bsde.degree);
    let weights = intercept_weights(epsilons, opts.fit_degree)?;
    let m = noise.paths;
    let mut intercept_samples = vec![0.0; m];
    let mut fd_slopes = Vec::with_capacity(epsilons.len());
    let mut fd_std_errors = Vec::with_capacity(epsilons.len());
    for (&eps, &w) in epsilons.iter().zip(&weights) {
        let sol = solve_perturbed(spec, grid, noise, &cand.forward, &uhat, eps, &basis, &opts.bsde)?;
        let q: Vec<f64> = sol.pathwise.iter().zip(&cand.backward.pathwise).map(|(a, b)| (a - b) / eps).collect();
        let e = Estimate::from_samples(&q);
        fd_slopes.push(e.value);
        fd_std_errors.push(e.std_error);
        intercept_samples.iter_mut().zip(&q).for_each(|(s, v)| *s += w * v);
    }
    let intercept = Estimate::from_samples(&intercept_samples);
    let cse = combined_se(intercept.std_error, aux.y0.std_error);
    let diff = intercept.value - aux.y0.value;
    let scale = intercept.value.abs().max(aux.y0.value.abs());
    let cross_diff = aux.y0.value - yg.value;
    let cross_se = combined_se(aux.y0.std_error, yg.std_error);
    Ok(GradientCheckReport {
        epsilons: epsilons.to_vec(),
        fd_slopes,
        fd_std_errors,
        cost: cand.backward.y0,
        yhat0: aux.y0,
        yhat0_gamma: yg,
        extrapolated_intercept: intercept,
        combined_std_error: cse,
        verdict: verdict(diff, cse, scale, opts.sigmas),
        cross_method_difference: cross_diff,
        cross_method_std_error: cross_se,
        cross_method_verdict: verdict(cross_diff, cross_se, aux.y0.value.abs().max(yg.value.abs()), opts.sigmas),
    })
}

/// Rates of the forward expansion and of the backward expansion
/// `Y_eps - Y_bar - eps Y_1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionReport {
    pub forward: RateReport,
    pub backward: RateReport,
}

/// Forward and backward expansion rates on common noise. `Y_bar` is
/// conditioned on `X_bar`, `Y_1` on `(X_bar, X_1)` and `Y_eps` on
/// `(X_bar, (X_eps - X_bar) / eps)`, all with [`perturbed_basis`] or its
/// `X_bar` part.
pub fn expansion_check(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    noise: &BrownianBatch,
    u_bar: &Control,
    u: &Control,
    epsilons: &[f64],
    opts: &BsdeOptions,
) -> Result<ExpansionReport> {
    validate_epsilons(epsilons)?;
    let Dims { n, .. } = spec.dims;
    let base = solve_forward_sde(spec, grid, noise, u_bar)?;
    let bwd = solve_quadratic_bsde(spec, grid, noise, &base, opts)?;
    let uhat = realize_perturbation(&base, grid, u)?;
    let var = solve_variational_sde(spec, grid, noise, &base, &uhat)?;
    let basis = perturbed_basis(n, opts.degree);
    let y1 = {
        let states = variational_states(&base, &var)?;
        let cond = Conditioning::new(states.view(), &basis)?;
        let data = variational_bsde_data(spec, grid, &base, &bwd, &var)?;
        solve_linear_bsde_with(&data, grid, noise, cond, opts)?
    };
    let m = noise.paths;
    let (wx, wy) = ((grid.steps + 1) * n, grid.steps + 1);
    let zeros_x = vec![0.0; base.states.len()];
    let zeros_y = vec![0.0; bwd.y.len()];
    let scale_x = mean_sup_sq(&base.states, &zeros_x, None, m, wx, n);
    let scale_y = mean_sup_sq(&bwd.y, &zeros_y, None, m, wy, 1);
    drop((zeros_x, zeros_y));
    let (mut fx, mut rx, mut fy, mut ry) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for &eps in epsilons {
        let table = convex_perturbation(&base, &uhat, eps);
        let pert = solve_forward_sde(spec, grid, noise, &Control::OpenLoop(Arc::new(table)))?;
        fx.push(mean_sup_sq(&pert.states, &base.states, None, m, wx, n));
        rx.push(mean_sup_sq(&pert.states, &base.states, Some((&var.states, eps)), m, wx, n));
        let states = perturbed_states(&base, &pert, eps)?;
        let cond = Conditioning::new(states.view(), &basis)?;
        let sol = solve_quadratic_bsde_with(spec, grid, noise, &pert, cond, opts)?;
        fy.push(mean_sup_sq(&sol.y, &bwd.y, None, m, wy, 1));
        ry.push(mean_sup_sq(&sol.y, &bwd.y, Some((&y1.y, eps)), m, wy, 1));
    }
    Ok(ExpansionReport {
        forward: rate_report(epsilons, fx, rx, scale_x)?,
        backward: rate_report(epsilons, fy, ry, scale_y)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescentOptions {
    pub bsde: BsdeOptions,
    /// Step size `eta_k = step / (1 + decay k)`.
    pub step: f64,
    pub decay: f64,
    pub max_iters: usize,
    /// Halt after this many consecutive increases of `J`.
    pub patience: usize,
    /// An increase counts only when it exceeds this multiple of the
    /// standard error of `J`; shared noise makes smaller moves round-off.
    pub increase_tolerance_se: f64,
}

impl Default for DescentOptions {
    fn default() -> Self {
        Self {
            bsde: BsdeOptions::with_degree(2),
            step: 0.5,
            decay: 0.0,
            max_iters: 30,
            patience: 5,
            increase_tolerance_se: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescentIterate {
    pub iteration: usize,
    pub cost: f64,
    pub std_error: f64,
    /// `sqrt(E[sum_i |Gamma_i g_i|^2 dt])`.
    pub gradient_norm: f64,
    pub step: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DescentStatus {
    Completed,
    /// `J` increased `patience` times in a row.
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescentResult {
    pub trace: Vec<DescentIterate>,
    pub control: AffineFeedback,
    pub status: DescentStatus,
}

impl DescentResult {
    /// `iteration,J,stderr,gradient_norm,step`.
    pub fn trace_csv(&self) -> String {
        let mut s = String::from("iteration,J,stderr,gradient_norm,step\n");
        for it in &self.trace {
            s.push_str(&format!(
                "{},{:e},{:e},{:e},{:e}\n",
                it.iteration, it.cost, it.std_error, it.gradient_norm, it.step
            ));
        }
        s
    }

    pub fn final_cost(&self) -> f64 {
        self.trace.last().map_or(f64::NAN, |t| t.cost)
    }
}

/// Per step, the least-squares affine fit in `x` of the weighted gradient
/// `Gamma_i g_i / (1 - f_y dt)`: the `L^2` projection of the representation
/// of `Y_hat_0` on the parameter directions of an affine feedback. Returns
/// `(offset, gain, squared norm)` with the layouts of [`AffineFeedback`].
fn affine_descent_direction(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    cand: &Candidate,
) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    let Dims { n, k, .. } = spec.dims;
    let (m, steps) = (cand.forward.paths, grid.steps);
    let c = spec.coeffs.as_ref();
    let dt = grid.dt;
    let mut offset = vec![0.0; (steps + 1) * k];
    let mut gain = vec![0.0; (steps + 1) * k * n];
    let mut norm2 = 0.0;
    let ridge = default_ridge(m);
    for i in 0..steps {
        let t = grid.times[i];
        let mut features = vec![0.0; m * (n + 1)];
        let mut targets = vec![0.0; m * k];
        features.par_chunks_mut(n + 1).zip(targets.par_chunks_mut(k)).enumerate().for_each(|(path, (f, tg))| {
            let x = cand.forward.state(path, i);
            f[0] = 1.0;
            f[1..].copy_from_slice(x);
            let fy = c.generator_y(
                t,
                x,
                cand.backward.y_at(path, i),
                cand.backward.z_at(path, i),
                cand.forward.control(path, i),
            );
            let w = cand.gamma.at(path, i) / (1.0 - fy * dt);
            for (o, g) in tg.iter_mut().zip(cand.gradient.at(path, i)) {
                *o = w * g;
            }
        });
        norm2 += targets.iter().map(|v| v * v).sum::<f64>() / m as f64 * dt;
        for l in 0..k {
            let col: Vec<f64> = (0..m).map(|p| targets[p * k + l]).collect();
            let fit = regress_conditional_expectation(&features, n + 1, &col, ridge)?;
            offset[i * k + l] = fit.coefficients[0];
            gain[(i * k + l) * n..(i * k + l + 1) * n].copy_from_slice(&fit.coefficients[1..]);
        }
    }
    // the control at the terminal time is never used; keep it in step
    offset.copy_within((steps - 1) * k..steps * k, steps * k);
    gain.copy_within((steps - 1) * k * n..steps * k * n, steps * k * n);
    Ok((offset, gain, norm2))
}

/// Projected gradient descent on the parameters of a per-step affine
/// feedback; values are projected onto `U` pointwise by the feedback map.
/// All iterations share `noise`, so successive costs are comparable
/// without fresh sampling error.
pub fn projected_gradient_descent(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    noise: &BrownianBatch,
    init: AffineFeedback,
    opts: &DescentOptions,
) -> Result<DescentResult> {
    let Dims { n, k, .. } = spec.dims;
    if init.n != n || init.k != k || init.steps() != grid.steps {
        return Err(Error::Dimension("initial feedback does not match the problem".into()));
    }
    if !(opts.step > 0.0 && opts.decay >= 0.0) {
        return Err(Error::InvalidProblem("descent step must be > 0 and decay >= 0".into()));
    }
    let mut theta = init;
    theta.domain = Some(spec.domain.clone());
    let mut trace = Vec::new();
    let mut increases = 0;
    let mut status = DescentStatus::Completed;
    for it in 0..=opts.max_iters {
        let cand = solve_candidate(spec, grid, noise, &Control::feedback(theta.clone()), &opts.bsde)?;
        let (doff, dgain, norm2) = affine_descent_direction(spec, grid, &cand)?;
        let eta = opts.step / (1.0 + opts.decay * it as f64);
        if let Some(prev) = trace.last().map(|t: &DescentIterate| t.cost) {
            if cand.backward.y0.value > prev + opts.increase_tolerance_se * cand.backward.y0.std_error {
                increases += 1;
            } else {
                increases = 0;
            }
        }
        trace.push(DescentIterate {
            iteration: it,
            cost: cand.backward.y0.value,
            std_error: cand.backward.y0.std_error,
            gradient_norm: norm2.sqrt(),
            step: eta,
        });
        if increases >= opts.patience {
            status = DescentStatus::Diverged;
            break;
        }
        if it == opts.max_iters {
            break;
        }
        theta.offset.iter_mut().zip(&doff).for_each(|(a, d)| *a -= eta * d);
        theta.gain.iter_mut().zip(&dgain).for_each(|(a, d)| *a -= eta * d);
    }
    Ok(DescentResult { trace, control: theta, status })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpCheckOptions {
    pub bsde: BsdeOptions,
    /// Number of sampled grid times, spread evenly over `0..N`.
    pub times: usize,
    pub paths_per_time: usize,
    pub candidates_per_point: usize,
    /// Independent path sections used for the pointwise standard error.
    pub sections: usize,
    /// Tolerance in pointwise standard errors.
    pub tolerance_se: f64,
    /// Absolute floor added to the tolerance.
    pub tolerance_floor: f64,
    /// Share of candidates drawn outside `U` and projected onto it.
    pub boundary_fraction: f64,
    pub seed: u64,
}

impl Default for MpCheckOptions {
    fn default() -> Self {
        Self {
            bsde: BsdeOptions::with_degree(2),
            times: 16,
            paths_per_time: 256,
            candidates_per_point: 4,
            sections: 10,
            tolerance_se: 5.0,
            tolerance_floor: 1e-10,
            boundary_fraction: 0.5,
            seed: 0x6d70,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpCheckReport {
    pub samples: usize,
    /// Smallest `<H_u, v - u_bar>` over the samples.
    pub min_inner_product: f64,
    /// Tolerance at the sample attaining the minimum.
    pub tolerance_at_min: f64,
    /// Smallest `<H_u, v - u_bar> / tolerance`.
    pub min_normalized: f64,
    pub violations: usize,
    pub violation_fraction: f64,
    pub max_abs_gradient: f64,
    pub mean_gradient_std_error: f64,
}

/// Candidate `v` in `U`: uniform over the domain's bounding region, or with
/// probability `boundary_fraction` drawn from the doubled region and
/// projected onto `U`. Half-space domains sample around `u_bar`.
pub fn sample_candidate(
    domain: &ControlDomain,
    u_bar: &[f64],
    boundary_fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let outside = rng.random::<f64>() < boundary_fraction;
    let widen = if outside { 2.0 } else { 1.0 };
    let mut v: Vec<f64> = match domain {
        ControlDomain::Box { lower, upper } => lower
            .iter()
            .zip(upper)
            .map(|(l, u)| {
                let (c, h) = (0.5 * (l + u), 0.5 * (u - l) * widen);
                if h > 0.0 {
                    rng.random_range(c - h..=c + h)
                } else {
                    c
                }
            })
            .collect(),
        ControlDomain::Ball { center, radius } => loop {
            let r = radius * widen;
            let v: Vec<f64> =
                center.iter().map(|c| if r > 0.0 { rng.random_range(c - r..=c + r) } else { *c }).collect();
            let d2: f64 = v.iter().zip(center).map(|(a, b)| (a - b) * (a - b)).sum();
            if d2 <= r * r {
                break v;
            }
        },
        ControlDomain::HalfspaceIntersection { .. } => {
            u_bar.iter().map(|c| c + widen * rng.random_range(-1.0..=1.0)).collect()
        }
    };
    domain.project_in_place(&mut v);
    v
}

/// Samples `(t_i, path, v)` and evaluates `<H_u, v - u_bar_i>` with `H_u`
/// from the full-batch regression fits. The pointwise standard error of
/// `H_u` is the batch-means error over `sections` disjoint path sections,
/// each solved independently and evaluated at the same sampled points. A
/// sample violates the inequality when the inner product is below
/// `-(tolerance_se * |se . (v - u_bar)| + tolerance_floor)`.
pub fn check_maximum_principle(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    noise: &BrownianBatch,
    u_bar: &Control,
    opts: &MpCheckOptions,
) -> Result<MpCheckReport> {
    let Dims { k, .. } = spec.dims;
    let (m, steps) = (noise.paths, grid.steps);
    if opts.sections < 2 || m < opts.sections * 10 {
        return Err(Error::InvalidProblem("maximum-principle check needs >= 2 sections of >= 10 paths".into()));
    }
    if opts.times == 0 || opts.paths_per_time == 0 || opts.candidates_per_point == 0 {
        return Err(Error::InvalidProblem("maximum-principle check needs at least one sample".into()));
    }
    let forward = solve_forward_sde(spec, grid, noise, u_bar)?;
    let backward = solve_quadratic_bsde(spec, grid, noise, &forward, &opts.bsde)?;
    let adjoint = solve_adjoint(spec, grid, noise, &forward, &backward, &opts.bsde)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let times: Vec<usize> = (0..opts.times.min(steps)).map(|j| j * steps / opts.times.min(steps)).collect();
    let points: Vec<(usize, usize)> = times
        .iter()
        .flat_map(|&i| (0..opts.paths_per_time).map(move |_| i).collect::<Vec<_>>())
        .map(|i| (i, rng.random_range(0..m)))
        .collect();
    let eval = |bwd: &BackwardSolution, adj: &AdjointSolution| -> Vec<f64> {
        let mut out = vec![0.0; points.len() * k];
        out.par_chunks_mut(k).zip(&points).for_each(|(o, &(i, path))| {
            gradient_at(spec, grid, bwd, adj, i, forward.state(path, i), forward.control(path, i), o);
        });
        out
    };
    let full = eval(&backward, &adjoint);
    drop((backward, adjoint));

    let ks = opts.sections;
    let mut sum = vec![0.0; full.len()];
    let mut sum2 = vec![0.0; full.len()];
    for s in 0..ks {
        let range = s * m / ks..(s + 1) * m / ks;
        let nz = noise.subset(range.clone());
        let fw = forward.subset(range);
        let bw = solve_quadratic_bsde(spec, grid, &nz, &fw, &opts.bsde)?;
        let ad = solve_adjoint(spec, grid, &nz, &fw, &bw, &opts.bsde)?;
        let g = eval(&bw, &ad);
        for ((a, b), v) in sum.iter_mut().zip(sum2.iter_mut()).zip(&g) {
            *a += v;
            *b += v * v;
        }
    }
    let kf = ks as f64;
    // a section uses M / K paths, so the full batch has the section spread over sqrt(K)
    let se: Vec<f64> = sum
        .iter()
        .zip(&sum2)
        .map(|(a, b)| {
            let mean = a / kf;
            ((b / kf - mean * mean).max(0.0) * kf / (kf - 1.0) / kf).sqrt()
        })
        .collect();

    let mut samples = 0;
    let mut violations = 0;
    let mut min_ip = f64::INFINITY;
    let mut tol_at_min = 0.0;
    let mut min_norm = f64::INFINITY;
    for (j, &(i, path)) in points.iter().enumerate() {
        let ub = forward.control(path, i);
        let g = &full[j * k..(j + 1) * k];
        let s = &se[j * k..(j + 1) * k];
        for _ in 0..opts.candidates_per_point {
            let v = sample_candidate(&spec.domain, ub, opts.boundary_fraction, &mut rng);
            debug_assert!(spec.domain.contains(&v));
            let ip: f64 = g.iter().zip(&v).zip(ub).map(|((g, v), u)| g * (v - u)).sum();
            let spread: f64 = s.iter().zip(&v).zip(ub).map(|((s, v), u)| (s * (v - u)).powi(2)).sum::<f64>().sqrt();
            let tol = opts.tolerance_se * spread + opts.tolerance_floor;
            samples += 1;
            if ip < -tol {
                violations += 1;
            }
            if ip < min_ip {
                min_ip = ip;
                tol_at_min = tol;
            }
            min_norm = min_norm.min(ip / tol);
        }
    }
    Ok(MpCheckReport {
        samples,
        min_inner_product: min_ip,
        tolerance_at_min: tol_at_min,
        min_normalized: min_norm,
        violations,
        violation_fraction: violations as f64 / samples as f64,
        max_abs_gradient: full.iter().fold(0.0, |a, v| a.max(v.abs())),
        mean_gradient_std_error: se.iter().sum::<f64>() / se.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::families::{self, FnCoefficients};
    use crate::paths::simulate_brownian;

    fn linear_spec(sigma_u: f64) -> ProblemSpec {
        let base = families::zero_problem(Dims { n: 1, d: 1, k: 1 }, 1.0);
        let c = FnCoefficients {
            drift: Box::new(|_, x, u| 0.3 * x + 1.5 * u),
            drift_x: Box::new(|_, _, _| 0.3),
            drift_u: Box::new(|_, _, _| 1.5),
            diffusion: Box::new(move |_, _, u| 0.5 + sigma_u * u),
            diffusion_u: Box::new(move |_, _, _| sigma_u),
            terminal: Box::new(|x| 2.0 * x),
            terminal_x: Box::new(|_| 2.0),
            ..FnCoefficients::zero()
        };
        let mut k = base.constants.clone();
        k.phi_sup = 10.0;
        ProblemSpec::new(base.dims, 1.0, vec![0.0], Arc::new(c), families::unit_box(1), k).unwrap()
    }

    #[test]
    fn cost_is_the_terminal_constant_without_generator() {
        let base = families::zero_problem(Dims { n: 1, d: 1, k: 1 }, 1.0);
        let c = FnCoefficients {
            diffusion: Box::new(|_, _, _| 1.0),
            drift: Box::new(|_, _, u| u),
            terminal: Box::new(|_| 1.25),
            ..FnCoefficients::zero()
        };
        let mut k = base.constants.clone();
        k.phi_sup = 2.0;
        let spec = ProblemSpec::new(base.dims, 1.0, vec![0.0], Arc::new(c), families::unit_box(1), k).unwrap();
        let grid = TimeGrid::new(10, 1.0).unwrap();
        let noise = simulate_brownian(&grid, 1, 500, 1, 0).unwrap();
        for u in [-1.0, 0.0, 0.7] {
            let j =
                cost_functional(&spec, &grid, &noise, &Control::constant(vec![u]), &BsdeOptions::default()).unwrap();
            assert!((j.value - 1.25).abs() < 1e-12);
        }
    }

    #[test]
    fn no_perturbation_gives_zero_quotients() {
        let spec = families::tanh_family(0.0, 1.0);
        let grid = TimeGrid::new(10, 1.0).unwrap();
        let noise = simulate_brownian(&grid, 1, 2000, 2, 0).unwrap();
        let u = Control::constant(vec![0.2]);
        let r = gateaux_check(&spec, &grid, &noise, &u, &u, &DEFAULT_EPSILONS, &GateauxOptions::default()).unwrap();
        assert!(r.fd_slopes.iter().all(|v| *v == 0.0));
        assert_eq!(r.yhat0.value, 0.0);
        assert_eq!(r.yhat0_gamma.value, 0.0);
        assert_eq!(r.verdict, Verdict::Pass);
    }

    #[test]
    fn affine_problem_has_exact_quotients() {
        let spec = linear_spec(0.0);
        let grid = TimeGrid::new(20, 1.0).unwrap();
        let noise = simulate_brownian(&grid, 1, 2000, 3, 0).unwrap();
        let ub = Control::constant(vec![0.1]);
        let u = Control::constant(vec![0.6]);
        let r = gateaux_check(&spec, &grid, &noise, &ub, &u, &DEFAULT_EPSILONS, &GateauxOptions::default()).unwrap();
        // J(eps) = 2 E[X_T] is affine in eps; Y_hat_0 = 2 * int e^{0.3 (T - t)} 1.5 * 0.5 dt on the grid
        for v in &r.fd_slopes {
            assert!((v - r.yhat0.value).abs() < 1e-9, "{v} vs {}", r.yhat0.value);
        }
        assert!((r.extrapolated_intercept.value - r.yhat0.value).abs() < 1e-9);
        assert!(r.yhat0.value > 0.0);
        assert_eq!(r.verdict, Verdict::Pass);
    }

    #[test]
    fn sampled_candidates_lie_in_the_domain() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let domains = [
            ControlDomain::Box { lower: vec![-1.0, 0.0], upper: vec![2.0, 0.5] },
            ControlDomain::Ball { center: vec![0.5, -0.5], radius: 0.7 },
            ControlDomain::HalfspaceIntersection { normals: vec![vec![1.0, 1.0]], offsets: vec![0.3] },
        ];
        for d in &domains {
            let mut projected = 0;
            for _ in 0..1000 {
                let v = sample_candidate(d, &[0.0, 0.0], 0.5, &mut rng);
                assert!(d.contains(&v));
                if let ControlDomain::Box { lower, upper } = d {
                    projected += v.iter().zip(lower.iter().zip(upper)).any(|(x, (l, u))| x == l || x == u) as usize;
                }
            }
            if matches!(d, ControlDomain::Box { .. }) {
                assert!(projected > 300 && projected < 700, "{projected}");
            }
        }
    }

    #[test]
    fn single_point_domain_has_no_violations() {
        let base = families::linear_quadratic(Default::default(), 1.0, 0.5);
        let spec = ProblemSpec::new(
            base.dims,
            base.horizon,
            base.x0.clone(),
            base.coeffs.clone(),
            ControlDomain::Box { lower: vec![0.3], upper: vec![0.3] },
            base.constants.clone(),
        )
        .unwrap();
        let grid = TimeGrid::new(10, 0.5).unwrap();
        let noise = simulate_brownian(&grid, 1, 2000, 5, 0).unwrap();
        let opts = MpCheckOptions { times: 4, paths_per_time: 20, ..Default::default() };
        let r = check_maximum_principle(&spec, &grid, &noise, &Control::constant(vec![0.3]), &opts).unwrap();
        assert_eq!(r.violations, 0);
        assert_eq!(r.min_inner_product, 0.0);
    }

    #[test]
    fn control_independent_problem_does_not_move() {
        let base = families::zero_problem(Dims { n: 1, d: 1, k: 1 }, 1.0);
        let c = FnCoefficients {
            drift: Box::new(|_, x, _| -0.5 * x),
            drift_x: Box::new(|_, _, _| -0.5),
            diffusion: Box::new(|_, _, _| 0.3),
            terminal: Box::new(|x| x.sin()),
            terminal_x: Box::new(|x| x.cos()),
            ..FnCoefficients::zero()
        };
        let mut k = base.constants.clone();
        k.phi_sup = 1.0;
        let spec = ProblemSpec::new(base.dims, 1.0, vec![0.5], Arc::new(c), families::unit_box(1), k).unwrap();
        let grid = TimeGrid::new(10, 1.0).unwrap();
        let noise = simulate_brownian(&grid, 1, 1000, 6, 0).unwrap();
        let init = AffineFeedback::constant_in_time(10, &[0.2], &[0.1], None);
        let opts = DescentOptions { max_iters: 3, ..Default::default() };
        let r = projected_gradient_descent(&spec, &grid, &noise, init.clone(), &opts).unwrap();
        assert_eq!(r.control.offset, init.offset);
        assert_eq!(r.control.gain, init.gain);
        assert!(r.trace.windows(2).all(|w| w[0].cost == w[1].cost));
        assert_eq!(r.status, DescentStatus::Completed);
        assert_eq!(r.trace_csv().lines().count(), 5);
    }

    #[test]
    fn descent_lowers_the_linear_quadratic_cost() {
        let p = families::LinearQuadratic::default();
        let spec = families::linear_quadratic(p, 1.0, 1.0);
        let grid = TimeGrid::new(20, 1.0).unwrap();
        let noise = simulate_brownian(&grid, 1, 4000, 7, 0).unwrap();
        let init = AffineFeedback::constant_in_time(20, &[0.5], &[0.5], None);
        let opts = DescentOptions { max_iters: 8, ..Default::default() };
        let r = projected_gradient_descent(&spec, &grid, &noise, init, &opts).unwrap();
        let first = r.trace[0].cost;
        let last = r.final_cost();
        let oracle = families::riccati_cost(&p, 1.0, 1.0);
        assert!(last < first);
        assert!((last - oracle).abs() < 0.05 * oracle, "{last} vs {oracle}");
    }
}
