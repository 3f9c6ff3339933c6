//! Problem definition: dimensions, coefficient evaluators, the convex control
//! domain, declared growth constants and the constants derived from them.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bmo::{psi_inverse, CriticalExponent};
use crate::error::{Error, Result};

/// State, Brownian and control dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub n: usize,
    pub d: usize,
    pub k: usize,
}

/// Coefficient evaluators of the controlled forward-backward system and their
/// first derivatives.
///
/// Matrices are written row-major into caller-provided buffers:
///
/// * `diffusion`: `n x d`, entry `(r, i)` at `r * d + i`; column `i` is `sigma^i`.
/// * `drift_x`: `n x n`; `drift_u`: `n x k`.
/// * `diffusion_x`: `d` blocks of `n x n`, block `i` is the Jacobian of column
///   `sigma^i`, entry `(r, c)` at `(i * n + r) * n + c`.
/// * `diffusion_u`: `d` blocks of `n x k`, same layout.
pub trait Coefficients: Send + Sync {
    fn drift(&self, t: f64, x: &[f64], u: &[f64], out: &mut [f64]);
    fn diffusion(&self, t: f64, x: &[f64], u: &[f64], out: &mut [f64]);
    fn generator(&self, t: f64, x: &[f64], y: f64, z: &[f64], u: &[f64]) -> f64;
    fn terminal(&self, x: &[f64]) -> f64;

    fn drift_x(&self, t: f64, x: &[f64], u: &[f64], out: &mut [f64]);
    fn drift_u(&self, t: f64, x: &[f64], u: &[f64], out: &mut [f64]);
    fn diffusion_x(&self, t: f64, x: &[f64], u: &[f64], out: &mut [f64]);
    fn diffusion_u(&self, t: f64, x: &[f64], u: &[f64], out: &mut [f64]);
    fn generator_x(&self, t: f64, x: &[f64], y: f64, z: &[f64], u: &[f64], out: &mut [f64]);
    fn generator_y(&self, t: f64, x: &[f64], y: f64, z: &[f64], u: &[f64]) -> f64;
    fn generator_z(&self, t: f64, x: &[f64], y: f64, z: &[f64], u: &[f64], out: &mut [f64]);
    fn generator_u(&self, t: f64, x: &[f64], y: f64, z: &[f64], u: &[f64], out: &mut [f64]);
    fn terminal_x(&self, x: &[f64], out: &mut [f64]);
}

/// Convex control set `U` with a closed-form (or exactly terminating) projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ControlDomain {
    Box {
        lower: Vec<f64>,
        upper: Vec<f64>,
    },
    Ball {
        center: Vec<f64>,
        radius: f64,
    },
    /// `{ v : normals[j] . v <= offsets[j] }`.
    HalfspaceIntersection {
        normals: Vec<Vec<f64>>,
        offsets: Vec<f64>,
    },
}

const HALFSPACE_FEAS_TOL: f64 = 1e-12;

impl ControlDomain {
    pub fn dim(&self) -> usize {
        match self {
            ControlDomain::Box { lower, .. } => lower.len(),
            ControlDomain::Ball { center, .. } => center.len(),
            ControlDomain::HalfspaceIntersection { normals, .. } => normals.first().map_or(0, Vec::len),
        }
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidProblem(msg));
        match self {
            ControlDomain::Box { lower, upper } => {
                if lower.len() != k || upper.len() != k {
                    return bad(format!("box bounds must have length {k}"));
                }
                if lower.iter().zip(upper).any(|(l, u)| !(l <= u)) {
                    return bad("box requires lower <= upper".into());
                }
            }
            ControlDomain::Ball { center, radius } => {
                if center.len() != k {
                    return bad(format!("ball center must have length {k}"));
                }
                if !(radius.is_finite() && *radius >= 0.0) {
                    return bad("ball radius must be finite and non-negative".into());
                }
            }
            ControlDomain::HalfspaceIntersection { normals, offsets } => {
                if normals.len() != offsets.len() {
                    return bad("one offset per halfspace normal".into());
                }
                if normals.iter().any(|a| a.len() != k || a.iter().all(|v| *v == 0.0)) {
                    return bad(format!("halfspace normals must be non-zero with length {k}"));
                }
            }
        }
        Ok(())
    }

    pub fn contains(&self, v: &[f64]) -> bool {
        match self {
            ControlDomain::Box { lower, upper } => {
                v.iter().zip(lower.iter().zip(upper)).all(|(x, (l, u))| *l <= *x && *x <= *u)
            }
            ControlDomain::Ball { center, radius } => dist2(v, center) <= radius * radius,
            ControlDomain::HalfspaceIntersection { normals, offsets } => {
                normals.iter().zip(offsets).all(|(a, c)| dot(a, v) <= c + HALFSPACE_FEAS_TOL * (1.0 + c.abs()))
            }
        }
    }

    /// Euclidean projection onto the domain, in place.
    pub fn project_in_place(&self, v: &mut [f64]) {
        match self {
            ControlDomain::Box { lower, upper } => {
                for ((x, l), u) in v.iter_mut().zip(lower).zip(upper) {
                    *x = x.clamp(*l, *u);
                }
            }
            ControlDomain::Ball { center, radius } => {
                let r2 = dist2(v, center);
                if r2 > radius * radius {
                    let mut s = radius / r2.sqrt();
                    let orig = v.to_vec();
                    // rounding can leave the result a few ulps outside
                    loop {
                        for ((x, o), c) in v.iter_mut().zip(&orig).zip(center) {
                            *x = c + (o - c) * s;
                        }
                        if dist2(v, center) <= radius * radius {
                            break;
                        }
                        s *= 1.0 - 2.0 * f64::EPSILON;
                    }
                }
            }
            ControlDomain::HalfspaceIntersection { normals, offsets } => {
                if self.contains(v) {
                    return;
                }
                if normals.len() == 1 {
                    project_halfspace(v, &normals[0], offsets[0]);
                    return;
                }
                dykstra(v, normals, offsets);
            }
        }
    }

    pub fn project(&self, v: &[f64]) -> Vec<f64> {
        let mut out = v.to_vec();
        self.project_in_place(&mut out);
        out
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn project_halfspace(v: &mut [f64], a: &[f64], c: f64) {
    let excess = dot(a, v) - c;
    if excess > 0.0 {
        let s = excess / dot(a, a);
        for (x, ai) in v.iter_mut().zip(a) {
            *x -= s * ai;
        }
    }
}

// Dykstra's alternating projections; exact for a single halfspace, converges
// to the projection onto the intersection otherwise.
fn dykstra(v: &mut [f64], normals: &[Vec<f64>], offsets: &[f64]) {
    let k = v.len();
    let m = normals.len();
    let mut corrections = vec![0.0; m * k];
    let mut y = vec![0.0; k];
    for _ in 0..10_000 {
        let mut change = 0.0;
        for j in 0..m {
            let cj = &mut corrections[j * k..(j + 1) * k];
            for i in 0..k {
                y[i] = v[i] + cj[i];
            }
            let mut proj = y.clone();
            project_halfspace(&mut proj, &normals[j], offsets[j]);
            for i in 0..k {
                change += (proj[i] - v[i]).abs();
                cj[i] = y[i] - proj[i];
                v[i] = proj[i];
            }
        }
        if change <= 1e-15 * (1.0 + v.iter().map(|x| x.abs()).sum::<f64>()) {
            break;
        }
    }
    // land strictly on the feasible side so that a second projection is a no-op
    for (a, c) in normals.iter().zip(offsets) {
        project_halfspace(v, a, *c);
    }
}

/// Growth and boundedness constants declared for the coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionConstants {
    pub alpha: f64,
    pub gamma: f64,
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub f_y_sup: f64,
    pub phi_sup: f64,
    pub phi_x_sup: f64,
    pub b_x_sup: f64,
    pub b_u_sup: f64,
    /// Per-column bounds of the diffusion Jacobians.
    pub sigma_x_sup: Vec<f64>,
    pub sigma_u_sup: f64,
}

impl AssumptionConstants {
    pub fn validate(&self, d: usize) -> Result<()> {
        let fields = [
            ("alpha", self.alpha),
            ("gamma", self.gamma),
            ("l1", self.l1),
            ("l2", self.l2),
            ("l3", self.l3),
            ("f_y_sup", self.f_y_sup),
            ("phi_sup", self.phi_sup),
            ("phi_x_sup", self.phi_x_sup),
            ("b_x_sup", self.b_x_sup),
            ("b_u_sup", self.b_u_sup),
            ("sigma_u_sup", self.sigma_u_sup),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidProblem(format!("constant {name} must be finite and non-negative, got {v}")));
            }
        }
        if self.gamma <= 0.0 {
            return Err(Error::InvalidProblem("gamma must be strictly positive".into()));
        }
        if self.sigma_x_sup.len() != d {
            return Err(Error::InvalidProblem(format!("sigma_x_sup needs one bound per Brownian component ({d})")));
        }
        if self.sigma_x_sup.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidProblem("sigma_x_sup entries must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// A fully specified control problem. Immutable after construction; the
/// coefficient set is shared behind an `Arc`.
#[derive(Clone)]
pub struct ProblemSpec {
    pub dims: Dims,
    pub horizon: f64,
    pub x0: Vec<f64>,
    pub coeffs: Arc<dyn Coefficients>,
    pub domain: ControlDomain,
    pub constants: AssumptionConstants,
}

impl fmt::Debug for ProblemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProblemSpec")
            .field("dims", &self.dims)
            .field("horizon", &self.horizon)
            .field("x0", &self.x0)
            .field("domain", &self.domain)
            .field("constants", &self.constants)
            .finish_non_exhaustive()
    }
}

impl ProblemSpec {
    pub fn new(
        dims: Dims,
        horizon: f64,
        x0: Vec<f64>,
        coeffs: Arc<dyn Coefficients>,
        domain: ControlDomain,
        constants: AssumptionConstants,
    ) -> Result<Self> {
        if dims.n == 0 || dims.d == 0 || dims.k == 0 {
            return Err(Error::InvalidProblem("dimensions n, d, k must be >= 1".into()));
        }
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::InvalidProblem("horizon must be positive".into()));
        }
        if x0.len() != dims.n || x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidProblem(format!("x0 must be {} finite values", dims.n)));
        }
        domain.validate(dims.k)?;
        constants.validate(dims.d)?;
        Ok(Self { dims, horizon, x0, coeffs, domain, constants })
    }

    pub fn with_horizon(&self, horizon: f64) -> Result<Self> {
        Self::new(
            self.dims,
            horizon,
            self.x0.clone(),
            Arc::clone(&self.coeffs),
            self.domain.clone(),
            self.constants.clone(),
        )
    }
}

/// Reusable buffers holding every coefficient derivative at one point.
#[derive(Debug, Clone)]
pub struct DerivativeBuffers {
    pub b_x: Vec<f64>,
    pub b_u: Vec<f64>,
    pub sigma_x: Vec<f64>,
    pub sigma_u: Vec<f64>,
    pub f_x: Vec<f64>,
    pub f_y: f64,
    pub f_z: Vec<f64>,
    pub f_u: Vec<f64>,
}

impl DerivativeBuffers {
    pub fn new(dims: Dims) -> Self {
        let Dims { n, d, k } = dims;
        Self {
            b_x: vec![0.0; n * n],
            b_u: vec![0.0; n * k],
            sigma_x: vec![0.0; d * n * n],
            sigma_u: vec![0.0; d * n * k],
            f_x: vec![0.0; n],
            f_y: 0.0,
            f_z: vec![0.0; d],
            f_u: vec![0.0; k],
        }
    }

    pub fn evaluate(&mut self, c: &dyn Coefficients, t: f64, x: &[f64], y: f64, z: &[f64], u: &[f64]) {
        c.drift_x(t, x, u, &mut self.b_x);
        c.drift_u(t, x, u, &mut self.b_u);
        c.diffusion_x(t, x, u, &mut self.sigma_x);
        c.diffusion_u(t, x, u, &mut self.sigma_u);
        c.generator_x(t, x, y, z, u, &mut self.f_x);
        self.f_y = c.generator_y(t, x, y, z, u);
        c.generator_z(t, x, y, z, u, &mut self.f_z);
        c.generator_u(t, x, y, z, u, &mut self.f_u);
    }
}

/// Constants derived from the declared ones: the a-priori bound `A`, the
/// critical exponent `p_bar` and the admissibility exponent `4 p_bar*`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivedConstants {
    pub alpha_tilde: f64,
    #[serde(rename = "A")]
    pub a: f64,
    pub p_bar: f64,
    /// `p_bar - 1`, kept separately since it is usually far below `f64::EPSILON`.
    pub p_bar_minus_one: f64,
    pub p_bar_star: f64,
    pub admissibility_exponent: f64,
    /// Value `Psi(p_bar)` was solved for.
    pub psi_target: f64,
}

/// `(alpha_tilde, A)`; always finite for validated constants.
pub fn a_priori_bound(spec: &ProblemSpec) -> (f64, f64) {
    let c = &spec.constants;
    let t = spec.horizon;
    let alpha_tilde =
        (t * c.f_y_sup).exp() * (c.phi_sup + t * c.f_y_sup + c.alpha * t + c.l2 * c.l2 * t / (4.0 * c.gamma));
    let a = alpha_tilde
        + (4.0 * c.gamma * alpha_tilde).exp() / (2.0 * c.gamma)
            * (1.0 / (4.0 * c.gamma) + (1.0 + c.f_y_sup * t) * alpha_tilde);
    (alpha_tilde, a)
}

pub fn derive_constants(spec: &ProblemSpec) -> Result<DerivedConstants> {
    let c = &spec.constants;
    let Dims { n, d, .. } = spec.dims;
    let t = spec.horizon;
    let (alpha_tilde, a) = a_priori_bound(spec);
    if !a.is_finite() {
        return Err(Error::Degenerate(format!("A overflows (alpha_tilde = {alpha_tilde})")));
    }
    let sigma_term: f64 = c.sigma_x_sup.iter().map(|s| s * s).sum::<f64>() * 2.0 * t;
    let target = ((c.l3 * c.l3 * t + 2.0 * c.gamma * c.gamma * a) * (3.0 + 4.0 * (n * d) as f64) + sigma_term).sqrt();
    let exponent = psi_inverse(target).map_err(|e| Error::Degenerate(format!("Psi(p_bar) = {target}: {e}")))?;
    match exponent {
        CriticalExponent::Infinite => Err(Error::Degenerate("Psi target is zero".into())),
        CriticalExponent::Finite { p, ln_excess } => {
            let p_bar_star = 1.0 + (-ln_excess).exp();
            if !p_bar_star.is_finite() {
                return Err(Error::Degenerate(format!(
                    "conjugate exponent of p_bar overflows (ln(p_bar - 1) = {ln_excess})"
                )));
            }
            Ok(DerivedConstants {
                alpha_tilde,
                a,
                p_bar: p,
                p_bar_minus_one: ln_excess.exp(),
                p_bar_star,
                admissibility_exponent: 4.0 * p_bar_star,
                psi_target: target,
            })
        }
    }
}

/// Region sampled by [`validate_assumptions`]. Controls are drawn from the box
/// `|u_j| <= u_radius` and then projected onto the control domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleRegion {
    pub x_radius: f64,
    pub y_radius: f64,
    pub z_radius: f64,
    pub u_radius: f64,
    pub seed: u64,
}

impl Default for SampleRegion {
    fn default() -> Self {
        Self { x_radius: 10.0, y_radius: 10.0, z_radius: 10.0, u_radius: 10.0, seed: 0x5eed }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    /// Largest observed `lhs / rhs` (inequalities) or scaled finite-difference
    /// discrepancy (derivative checks); at most 1 when passed.
    pub worst_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub samples: usize,
    pub checks: Vec<CheckOutcome>,
}

impl ValidationReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&CheckOutcome> {
        self.checks.iter().find(|c| c.name == name)
    }
}

struct Tracker {
    name: &'static str,
    worst: f64,
}

impl Tracker {
    fn new(name: &'static str) -> Self {
        Self { name, worst: 0.0 }
    }

    fn bound(&mut self, lhs: f64, rhs: f64) {
        let ratio = if lhs <= 1e-13 * (1.0 + rhs) {
            0.0
        } else if rhs <= 0.0 {
            f64::INFINITY
        } else {
            lhs / rhs
        };
        self.worst = self.worst.max(ratio);
    }

    fn finish(self) -> CheckOutcome {
        CheckOutcome { name: self.name.to_string(), passed: self.worst <= 1.0 + 1e-9, worst_ratio: self.worst }
    }
}

const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-6;

fn ensure_finite(values: &[f64], what: &'static str, t: f64) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { what, t })
    }
}

fn frob(m: &[f64]) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn norm(v: &[f64]) -> f64 {
    frob(v)
}

/// Spot-checks every declared bound and every derivative evaluator at
/// `sample_count` random points of `region`.
pub fn validate_assumptions(
    spec: &ProblemSpec,
    sample_count: usize,
    region: &SampleRegion,
) -> Result<ValidationReport> {
    if sample_count == 0 {
        return Err(Error::InvalidProblem("sample_count must be >= 1".into()));
    }
    let Dims { n, d, k } = spec.dims;
    let c = spec.coeffs.as_ref();
    let k_ = &spec.constants;
    let mut rng = ChaCha8Rng::seed_from_u64(region.seed);

    let mut t_f_zero = Tracker::new("f(t,x,0,0,u) <= alpha");
    let mut t_f_x = Tracker::new("|f_x| <= L1 (1+|y|+|z|^2+|u|)");
    let mut t_f_z = Tracker::new("|f_z| <= L2 + gamma |z|");
    let mut t_f_u = Tracker::new("|f_u| <= L3 (1+|y|+|z|^2+|u|)");
    let mut t_f_y = Tracker::new("|f_y| <= f_y_sup");
    let mut t_phi = Tracker::new("|Phi| <= Phi_sup");
    let mut t_phi_x = Tracker::new("|Phi_x| <= Phi_x_sup");
    let mut t_b_x = Tracker::new("|b_x| <= b_x_sup");
    let mut t_b_u = Tracker::new("|b_u| <= b_u_sup");
    let mut t_s_x = Tracker::new("|sigma_x^i| <= sigma_x_sup[i]");
    let mut t_s_u = Tracker::new("|sigma_u^i| <= sigma_u_sup");
    let mut fd = [
        Tracker::new("fd: b_x"),
        Tracker::new("fd: b_u"),
        Tracker::new("fd: sigma_x"),
        Tracker::new("fd: sigma_u"),
        Tracker::new("fd: f_x"),
        Tracker::new("fd: f_y"),
        Tracker::new("fd: f_z"),
        Tracker::new("fd: f_u"),
        Tracker::new("fd: Phi_x"),
    ];

    let mut x = vec![0.0; n];
    let mut z = vec![0.0; d];
    let mut u = vec![0.0; k];
    let zero_z = vec![0.0; d];
    let mut buf = DerivativeBuffers::new(spec.dims);
    let mut phi_x = vec![0.0; n];
    let mut b = vec![0.0; n];
    let mut b2 = vec![0.0; n];
    let mut s = vec![0.0; n * d];
    let mut s2 = vec![0.0; n * d];

    for _ in 0..sample_count {
        let t = rng.random_range(0.0..=spec.horizon);
        for v in x.iter_mut() {
            *v = rng.random_range(-region.x_radius..=region.x_radius);
        }
        let y = rng.random_range(-region.y_radius..=region.y_radius);
        for v in z.iter_mut() {
            *v = rng.random_range(-region.z_radius..=region.z_radius);
        }
        for v in u.iter_mut() {
            *v = rng.random_range(-region.u_radius..=region.u_radius);
        }
        spec.domain.project_in_place(&mut u);

        let f0 = c.generator(t, &x, 0.0, &zero_z, &u);
        let f = c.generator(t, &x, y, &z, &u);
        let phi = c.terminal(&x);
        ensure_finite(&[f0, f], "generator", t)?;
        ensure_finite(&[phi], "terminal", t)?;
        buf.evaluate(c, t, &x, y, &z, &u);
        c.terminal_x(&x, &mut phi_x);
        ensure_finite(&buf.b_x, "drift_x", t)?;
        ensure_finite(&buf.b_u, "drift_u", t)?;
        ensure_finite(&buf.sigma_x, "diffusion_x", t)?;
        ensure_finite(&buf.sigma_u, "diffusion_u", t)?;
        ensure_finite(&buf.f_x, "generator_x", t)?;
        ensure_finite(&[buf.f_y], "generator_y", t)?;
        ensure_finite(&buf.f_z, "generator_z", t)?;
        ensure_finite(&buf.f_u, "generator_u", t)?;
        ensure_finite(&phi_x, "terminal_x", t)?;

        let growth = 1.0 + y.abs() + norm(&z).powi(2) + norm(&u);
        t_f_zero.bound(f0.abs(), k_.alpha);
        t_f_x.bound(norm(&buf.f_x), k_.l1 * growth);
        t_f_z.bound(norm(&buf.f_z), k_.l2 + k_.gamma * norm(&z));
        t_f_u.bound(norm(&buf.f_u), k_.l3 * growth);
        t_f_y.bound(buf.f_y.abs(), k_.f_y_sup);
        t_phi.bound(phi.abs(), k_.phi_sup);
        t_phi_x.bound(norm(&phi_x), k_.phi_x_sup);
        t_b_x.bound(frob(&buf.b_x), k_.b_x_sup);
        t_b_u.bound(frob(&buf.b_u), k_.b_u_sup);
        for i in 0..d {
            t_s_x.bound(frob(&buf.sigma_x[i * n * n..(i + 1) * n * n]), k_.sigma_x_sup[i]);
            t_s_u.bound(frob(&buf.sigma_u[i * n * k..(i + 1) * n * k]), k_.sigma_u_sup);
        }

        // central finite differences of the base evaluators
        let fd_check = |tr: &mut Tracker, analytic: f64, numeric: f64| {
            let scaled = (analytic - numeric).abs() / (FD_TOL * (1.0 + numeric.abs()));
            tr.worst = tr.worst.max(scaled);
        };
        for col in 0..n {
            let h = FD_STEP * (1.0 + x[col].abs());
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[col] += h;
            xm[col] -= h;
            c.drift(t, &xp, &u, &mut b);
            c.drift(t, &xm, &u, &mut b2);
            for r in 0..n {
                fd_check(&mut fd[0], buf.b_x[r * n + col], (b[r] - b2[r]) / (2.0 * h));
            }
            c.diffusion(t, &xp, &u, &mut s);
            c.diffusion(t, &xm, &u, &mut s2);
            for i in 0..d {
                for r in 0..n {
                    fd_check(
                        &mut fd[2],
                        buf.sigma_x[(i * n + r) * n + col],
                        (s[r * d + i] - s2[r * d + i]) / (2.0 * h),
                    );
                }
            }
            let num = (c.generator(t, &xp, y, &z, &u) - c.generator(t, &xm, y, &z, &u)) / (2.0 * h);
            fd_check(&mut fd[4], buf.f_x[col], num);
            let num = (c.terminal(&xp) - c.terminal(&xm)) / (2.0 * h);
            fd_check(&mut fd[8], phi_x[col], num);
        }
        for col in 0..k {
            let h = FD_STEP * (1.0 + u[col].abs());
            let mut up = u.clone();
            let mut um = u.clone();
            up[col] += h;
            um[col] -= h;
            c.drift(t, &x, &up, &mut b);
            c.drift(t, &x, &um, &mut b2);
            for r in 0..n {
                fd_check(&mut fd[1], buf.b_u[r * k + col], (b[r] - b2[r]) / (2.0 * h));
            }
            c.diffusion(t, &x, &up, &mut s);
            c.diffusion(t, &x, &um, &mut s2);
            for i in 0..d {
                for r in 0..n {
                    fd_check(
                        &mut fd[3],
                        buf.sigma_u[(i * n + r) * k + col],
                        (s[r * d + i] - s2[r * d + i]) / (2.0 * h),
                    );
                }
            }
            let num = (c.generator(t, &x, y, &z, &up) - c.generator(t, &x, y, &z, &um)) / (2.0 * h);
            fd_check(&mut fd[7], buf.f_u[col], num);
        }
        {
            let h = FD_STEP * (1.0 + y.abs());
            let num = (c.generator(t, &x, y + h, &z, &u) - c.generator(t, &x, y - h, &z, &u)) / (2.0 * h);
            fd_check(&mut fd[5], buf.f_y, num);
        }
        for col in 0..d {
            let h = FD_STEP * (1.0 + z[col].abs());
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[col] += h;
            zm[col] -= h;
            let num = (c.generator(t, &x, y, &zp, &u) - c.generator(t, &x, y, &zm, &u)) / (2.0 * h);
            fd_check(&mut fd[6], buf.f_z[col], num);
        }
    }

    let mut checks = vec![
        t_f_zero.finish(),
        t_f_x.finish(),
        t_f_z.finish(),
        t_f_u.finish(),
        t_f_y.finish(),
        t_phi.finish(),
        t_phi_x.finish(),
        t_b_x.finish(),
        t_b_u.finish(),
        t_s_x.finish(),
        t_s_u.finish(),
    ];
    checks.extend(fd.into_iter().map(Tracker::finish));
    Ok(ValidationReport { samples: sample_count, checks })
}
