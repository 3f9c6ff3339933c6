//! Built-in problem families and small test problems.
//!
//! * [`exponential_utility`]: `b = u`, `sigma = 1`, `f = (gamma/2)|z|^2`,
//!   `Phi = tanh`, `U = [-1, 1]`.
//! * [`linear_quadratic`]: `b = a x + b u`, `sigma = s x`,
//!   `f = (Q x^2 + R u^2)/2`, `Phi = G x^2 / 2`, with a Riccati oracle.
//! * [`tanh_family`]: bounded non-LQ coefficients that exercise every growth
//!   constant.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::model::{AssumptionConstants, Coefficients, ControlDomain, Dims, ProblemSpec};

pub type Fn3 = Box<dyn Fn(f64, f64, f64) -> f64 + Send + Sync>;
pub type Fn5 = Box<dyn Fn(f64, f64, f64, f64, f64) -> f64 + Send + Sync>;
pub type Fn1 = Box<dyn Fn(f64) -> f64 + Send + Sync>;

/// Scalar (`n = d = k = 1`) coefficients assembled from closures.
pub struct FnCoefficients {
    pub drift: Fn3,
    pub drift_x: Fn3,
    pub drift_u: Fn3,
    pub diffusion: Fn3,
    pub diffusion_x: Fn3,
    pub diffusion_u: Fn3,
    pub generator: Fn5,
    pub generator_x: Fn5,
    pub generator_y: Fn5,
    pub generator_z: Fn5,
    pub generator_u: Fn5,
    pub terminal: Fn1,
    pub terminal_x: Fn1,
}

fn zero3() -> Fn3 {
    Box::new(|_, _, _| 0.0)
}

fn zero5() -> Fn5 {
    Box::new(|_, _, _, _, _| 0.0)
}

impl FnCoefficients {
    /// Every coefficient identically zero.
    pub fn zero() -> Self {
        Self {
            drift: zero3(),
            drift_x: zero3(),
            drift_u: zero3(),
            diffusion: zero3(),
            diffusion_x: zero3(),
            diffusion_u: zero3(),
            generator: zero5(),
            generator_x: zero5(),
            generator_y: zero5(),
            generator_z: zero5(),
            generator_u: zero5(),
            terminal: Box::new(|_| 0.0),
            terminal_x: Box::new(|_| 0.0),
        }
    }

    /// `dX = dW`, `f = (gamma/2) z^2`, `Phi = 0`.
    pub fn scalar_quadratic(gamma: f64) -> Self {
        Self {
            diffusion: Box::new(|_, _, _| 1.0),
            generator: Box::new(move |_, _, _, z, _| 0.5 * gamma * z * z),
            generator_z: Box::new(move |_, _, _, z, _| gamma * z),
            ..Self::zero()
        }
    }
}

impl Coefficients for FnCoefficients {
    fn drift(&self, t: f64, x: &[f64], u: &[f64], out: &mut [f64]) {
        out[0] = (self.drift)(t, x[0], u[0]);
    }
    fn diffusion(&self, t: f64, x: &[f64], u: &[f64], out: &mut [f64]) {
        out[0] = (self.diffusion)(t, x[0], u[0]);
    }
    fn generator(&self, t: f64, x: &[f64], y: f64, z: &[f64], u: &[f64]) -> f64 {
        (self.generator)(t, x[0], y, z[0], u[0])
    }
    fn terminal(&self, x: &[f64]) -> f64 {
        (self.terminal)(x[0])
    }
    fn drift_x(&self, t: f64, x: &[f64], u: &[f64], out: &mut [f64]) {
        out[0] = (self.drift_x)(t, x[0], u[0]);
    }
    fn drift_u(&self, t: f64, x: &[f64], u: &[f64], out: &mut [f64]) {
        out[0] = (self.drift_u)(t, x[0], u[0]);
    }
    fn diffusion_x(&self, t: f64, x: &[f64], u: &[f64], out: &mut [f64]) {
        out[0] = (self.diffusion_x)(t, x[0], u[0]);
    }
    fn diffusion_u(&self, t: f64, x: &[f64], u: &[f64], out: &mut [f64]) {
        out[0] = (self.diffusion_u)(t, x[0], u[0]);
    }
    fn generator_x(&self, t: f64, x: &[f64], y: f64, z: &[f64], u: &[f64], out: &mut [f64]) {
        out[0] = (self.generator_x)(t, x[0], y, z[0], u[0]);
    }
    fn generator_y(&self, t: f64, x: &[f64], y: f64, z: &[f64], u: &[f64]) -> f64 {
        (self.generator_y)(t, x[0], y, z[0], u[0])
    }
    fn generator_z(&self, t: f64, x: &[f64], y: f64, z: &[f64], u: &[f64], out: &mut [f64]) {
        out[0] = (self.generator_z)(t, x[0], y, z[0], u[0]);
    }
    fn generator_u(&self, t: f64, x: &[f64], y: f64, z: &[f64], u: &[f64], out: &mut [f64]) {
        out[0] = (self.generator_u)(t, x[0], y, z[0], u[0]);
    }
    fn terminal_x(&self, x: &[f64], out: &mut [f64]) {
        out[0] = (self.terminal_x)(x[0]);
    }
}

/// Identically zero coefficients in arbitrary dimensions.
#[derive(Debug, Clone, Copy)]
pub struct ZeroCoefficients;

impl Coefficients for ZeroCoefficients {
    fn drift(&self, _: f64, _: &[f64], _: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn diffusion(&self, _: f64, _: &[f64], _: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn generator(&self, _: f64, _: &[f64], _: f64, _: &[f64], _: &[f64]) -> f64 {
        0.0
    }
    fn terminal(&self, _: &[f64]) -> f64 {
        0.0
    }
    fn drift_x(&self, _: f64, _: &[f64], _: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn drift_u(&self, _: f64, _: &[f64], _: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn diffusion_x(&self, _: f64, _: &[f64], _: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn diffusion_u(&self, _: f64, _: &[f64], _: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn generator_x(&self, _: f64, _: &[f64], _: f64, _: &[f64], _: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn generator_y(&self, _: f64, _: &[f64], _: f64, _: &[f64], _: &[f64]) -> f64 {
        0.0
    }
    fn generator_z(&self, _: f64, _: &[f64], _: f64, _: &[f64], _: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn generator_u(&self, _: f64, _: &[f64], _: f64, _: &[f64], _: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn terminal_x(&self, _: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
}

fn zero_constants(d: usize) -> AssumptionConstants {
    AssumptionConstants {
        alpha: 0.0,
        gamma: 1.0,
        l1: 0.0,
        l2: 0.0,
        l3: 0.0,
        f_y_sup: 0.0,
        phi_sup: 0.0,
        phi_x_sup: 0.0,
        b_x_sup: 0.0,
        b_u_sup: 0.0,
        sigma_x_sup: vec![0.0; d],
        sigma_u_sup: 0.0,
    }
}

pub fn unit_box(k: usize) -> ControlDomain {
    ControlDomain::Box { lower: vec![-1.0; k], upper: vec![1.0; k] }
}

/// All coefficients zero, `x0 = 0`, `U = [-1, 1]^k`.
pub fn zero_problem(dims: Dims, horizon: f64) -> ProblemSpec {
    ProblemSpec::new(
        dims,
        horizon,
        vec![0.0; dims.n],
        Arc::new(ZeroCoefficients),
        unit_box(dims.k),
        zero_constants(dims.d),
    )
    .expect("zero problem is valid")
}

/// `b = mu`, `sigma = s` (constants), zero cost, `T = 1`.
pub fn constant_coefficients(mu: f64, s: f64, x0: f64) -> ProblemSpec {
    let c = FnCoefficients {
        drift: Box::new(move |_, _, _| mu),
        diffusion: Box::new(move |_, _, _| s),
        ..FnCoefficients::zero()
    };
    ProblemSpec::new(Dims { n: 1, d: 1, k: 1 }, 1.0, vec![x0], Arc::new(c), unit_box(1), zero_constants(1))
        .expect("valid")
}

/// `b = x (a + u)`, `sigma = s x`, zero cost, `x0 = 1`, `T = 1`.
pub fn geometric(a: f64, s: f64) -> ProblemSpec {
    let c = FnCoefficients {
        drift: Box::new(move |_, x, u| x * (a + u)),
        drift_x: Box::new(move |_, _, u| a + u),
        drift_u: Box::new(|_, x, _| x),
        diffusion: Box::new(move |_, x, _| s * x),
        diffusion_x: Box::new(move |_, _, _| s),
        ..FnCoefficients::zero()
    };
    let mut k = zero_constants(1);
    k.b_x_sup = a.abs() + 1.0;
    k.sigma_x_sup = vec![s.abs()];
    ProblemSpec::new(Dims { n: 1, d: 1, k: 1 }, 1.0, vec![1.0], Arc::new(c), unit_box(1), k).expect("valid")
}

/// `b = B u`, `sigma = 1`, zero cost, `x0 = 0`, `T = 1`.
pub fn controlled_drift(b: f64) -> ProblemSpec {
    let c = FnCoefficients {
        drift: Box::new(move |_, _, u| b * u),
        drift_u: Box::new(move |_, _, _| b),
        diffusion: Box::new(|_, _, _| 1.0),
        ..FnCoefficients::zero()
    };
    let mut k = zero_constants(1);
    k.b_u_sup = b.abs();
    ProblemSpec::new(Dims { n: 1, d: 1, k: 1 }, 1.0, vec![0.0], Arc::new(c), unit_box(1), k).expect("valid")
}

/// Exponential-utility generator with a controlled drift.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExponentialUtility {
    pub gamma: f64,
}

impl Coefficients for ExponentialUtility {
    fn drift(&self, _: f64, _: &[f64], u: &[f64], out: &mut [f64]) {
        out[0] = u[0];
    }
    fn diffusion(&self, _: f64, _: &[f64], _: &[f64], out: &mut [f64]) {
        out[0] = 1.0;
    }
    fn generator(&self, _: f64, _: &[f64], _: f64, z: &[f64], _: &[f64]) -> f64 {
        0.5 * self.gamma * z[0] * z[0]
    }
    fn terminal(&self, x: &[f64]) -> f64 {
        x[0].tanh()
    }
    fn drift_x(&self, _: f64, _: &[f64], _: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
    }
    fn drift_u(&self, _: f64, _: &[f64], _: &[f64], out: &mut [f64]) {
        out[0] = 1.0;
    }
    fn diffusion_x(&self, _: f64, _: &[f64], _: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
    }
    fn diffusion_u(&self, _: f64, _: &[f64], _: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
    }
    fn generator_x(&self, _: f64, _: &[f64], _: f64, _: &[f64], _: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
    }
    fn generator_y(&self, _: f64, _: &[f64], _: f64, _: &[f64], _: &[f64]) -> f64 {
        0.0
    }
    fn generator_z(&self, _: f64, _: &[f64], _: f64, z: &[f64], _: &[f64], out: &mut [f64]) {
        out[0] = self.gamma * z[0];
    }
    fn generator_u(&self, _: f64, _: &[f64], _: f64, _: &[f64], _: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
    }
    fn terminal_x(&self, x: &[f64], out: &mut [f64]) {
        let c = x[0].cosh();
        out[0] = 1.0 / (c * c);
    }
}

pub fn exponential_utility(gamma: f64, x0: f64, horizon: f64) -> ProblemSpec {
    let constants = AssumptionConstants {
        alpha: 0.0,
        gamma,
        l1: 0.0,
        l2: 0.0,
        l3: 0.0,
        f_y_sup: 0.0,
        phi_sup: 1.0,
        phi_x_sup: 1.0,
        b_x_sup: 0.0,
        b_u_sup: 1.0,
        sigma_x_sup: vec![0.0],
        sigma_u_sup: 0.0,
    };
    ProblemSpec::new(
        Dims { n: 1, d: 1, k: 1 },
        horizon,
        vec![x0],
        Arc::new(ExponentialUtility { gamma }),
        unit_box(1),
        constants,
    )
    .expect("exponential-utility parameters are valid")
}

/// Scalar linear-quadratic problem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearQuadratic {
    pub a: f64,
    pub b: f64,
    pub s: f64,
    pub q: f64,
    pub r: f64,
    pub g: f64,
}

impl Default for LinearQuadratic {
    fn default() -> Self {
        Self { a: 0.1, b: 1.0, s: 0.2, q: 1.0, r: 1.0, g: 1.0 }
    }
}

impl Coefficients for LinearQuadratic {
    fn drift(&self, _: f64, x: &[f64], u: &[f64], out: &mut [f64]) {
        out[0] = self.a * x[0] + self.b * u[0];
    }
    fn diffusion(&self, _: f64, x: &[f64], _: &[f64], out: &mut [f64]) {
        out[0] = self.s * x[0];
    }
    fn generator(&self, _: f64, x: &[f64], _: f64, _: &[f64], u: &[f64]) -> f64 {
        0.5 * (self.q * x[0] * x[0] + self.r * u[0] * u[0])
    }
    fn terminal(&self, x: &[f64]) -> f64 {
        0.5 * self.g * x[0] * x[0]
    }
    fn drift_x(&self, _: f64, _: &[f64], _: &[f64], out: &mut [f64]) {
        out[0] = self.a;
    }
    fn drift_u(&self, _: f64, _: &[f64], _: &[f64], out: &mut [f64]) {
        out[0] = self.b;
    }
    fn diffusion_x(&self, _: f64, _: &[f64], _: &[f64], out: &mut [f64]) {
        out[0] = self.s;
    }
    fn diffusion_u(&self, _: f64, _: &[f64], _: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
    }
    fn generator_x(&self, _: f64, x: &[f64], _: f64, _: &[f64], _: &[f64], out: &mut [f64]) {
        out[0] = self.q * x[0];
    }
    fn generator_y(&self, _: f64, _: &[f64], _: f64, _: &[f64], _: &[f64]) -> f64 {
        0.0
    }
    fn generator_z(&self, _: f64, _: &[f64], _: f64, _: &[f64], _: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
    }
    fn generator_u(&self, _: f64, _: &[f64], _: f64, _: &[f64], u: &[f64], out: &mut [f64]) {
        out[0] = self.r * u[0];
    }
    fn terminal_x(&self, x: &[f64], out: &mut [f64]) {
        out[0] = self.g * x[0];
    }
}

/// Half-width of the control box of the linear-quadratic family.
pub const LQ_CONTROL_BOUND: f64 = 5.0;

/// The quadratic cost is unbounded on the whole line, so the declared
/// constants hold on the validation region `|x|, |u| <= 10` only.
pub fn linear_quadratic(p: LinearQuadratic, x0: f64, horizon: f64) -> ProblemSpec {
    let r = 10.0f64;
    let u_max = LQ_CONTROL_BOUND.min(r);
    let constants = AssumptionConstants {
        alpha: 0.5 * (p.q.abs() * r * r + p.r.abs() * u_max * u_max),
        gamma: 1e-3,
        l1: p.q.abs() * r,
        l2: 0.0,
        l3: p.r.abs(),
        f_y_sup: 0.0,
        phi_sup: 0.5 * p.g.abs() * r * r,
        phi_x_sup: p.g.abs() * r,
        b_x_sup: p.a.abs(),
        b_u_sup: p.b.abs(),
        sigma_x_sup: vec![p.s.abs()],
        sigma_u_sup: 0.0,
    };
    ProblemSpec::new(
        Dims { n: 1, d: 1, k: 1 },
        horizon,
        vec![x0],
        Arc::new(p),
        ControlDomain::Box { lower: vec![-LQ_CONTROL_BOUND], upper: vec![LQ_CONTROL_BOUND] },
        constants,
    )
    .expect("linear-quadratic parameters are valid")
}

/// Solution `P(t)` of `P' = -(2a + s^2) P - Q + b^2 P^2 / R`, `P(T) = G`,
/// on `steps + 1` uniform points (classical RK4 with 512 substeps per
/// interval).
pub fn riccati(p: &LinearQuadratic, horizon: f64, steps: usize) -> Vec<f64> {
    let rhs = |v: f64| -(2.0 * p.a + p.s * p.s) * v - p.q + p.b * p.b * v * v / p.r;
    let mut out = vec![0.0; steps + 1];
    out[steps] = p.g;
    let sub = 512;
    let h = horizon / (steps * sub) as f64;
    let mut v = p.g;
    for i in (0..steps).rev() {
        for _ in 0..sub {
            // integrate backwards in time: dv/d(-t) = -rhs
            let k1 = -rhs(v);
            let k2 = -rhs(v + 0.5 * h * k1);
            let k3 = -rhs(v + 0.5 * h * k2);
            let k4 = -rhs(v + h * k3);
            v += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        out[i] = v;
    }
    out
}

/// Optimal cost `P(0) x0^2 / 2` of the continuous-time problem.
pub fn riccati_cost(p: &LinearQuadratic, x0: f64, horizon: f64) -> f64 {
    0.5 * riccati(p, horizon, 1)[0] * x0 * x0
}

/// Optimal feedback gains `K_i = -b P(t_i) / R` on the grid.
pub fn riccati_gains(p: &LinearQuadratic, horizon: f64, steps: usize) -> Vec<f64> {
    riccati(p, horizon, steps).into_iter().map(|v| -p.b * v / p.r).collect()
}

/// Discrete-time Riccati recursion for the Euler scheme with left-point
/// running cost: returns `(P_i, K_i)` with optimal discrete cost
/// `P_0 x0^2 / 2`.
pub fn discrete_riccati(p: &LinearQuadratic, horizon: f64, steps: usize) -> (Vec<f64>, Vec<f64>) {
    let dt = horizon / steps as f64;
    let mut pv = vec![0.0; steps + 1];
    let mut kv = vec![0.0; steps + 1];
    pv[steps] = p.g;
    let fa = 1.0 + p.a * dt;
    let fb = p.b * dt;
    for i in (0..steps).rev() {
        let next = pv[i + 1];
        let k = -(fa * fb * next) / (p.r * dt + fb * fb * next);
        kv[i] = k;
        pv[i] = p.q * dt + p.r * dt * k * k + next * ((fa + fb * k).powi(2) + p.s * p.s * dt);
    }
    kv[steps] = kv[steps - 1];
    (pv, kv)
}

/// Bounded family with tanh nonlinearities:
/// `b = -tanh(x)/2 + u`, `sigma = 0.4 + 0.2 tanh(x) + 0.2 u`,
/// `f = -0.2 y + 0.25 z^2 + 0.3 z tanh(x) + 0.25 u^2 + 0.1 u tanh(x)`,
/// `Phi = sin(x)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TanhFamily;

fn sech2(x: f64) -> f64 {
    let c = x.cosh();
    1.0 / (c * c)
}

impl Coefficients for TanhFamily {
    fn drift(&self, _: f64, x: &[f64], u: &[f64], out: &mut [f64]) {
        out[0] = -0.5 * x[0].tanh() + u[0];
    }
    fn diffusion(&self, _: f64, x: &[f64], u: &[f64], out: &mut [f64]) {
        out[0] = 0.4 + 0.2 * x[0].tanh() + 0.2 * u[0];
    }
    fn generator(&self, _: f64, x: &[f64], y: f64, z: &[f64], u: &[f64]) -> f64 {
        let th = x[0].tanh();
        let (z, u) = (z[0], u[0]);
        -0.2 * y + 0.25 * z * z + 0.3 * z * th + 0.25 * u * u + 0.1 * u * th
    }
    fn terminal(&self, x: &[f64]) -> f64 {
        x[0].sin()
    }
    fn drift_x(&self, _: f64, x: &[f64], _: &[f64], out: &mut [f64]) {
        out[0] = -0.5 * sech2(x[0]);
    }
    fn drift_u(&self, _: f64, _: &[f64], _: &[f64], out: &mut [f64]) {
        out[0] = 1.0;
    }
    fn diffusion_x(&self, _: f64, x: &[f64], _: &[f64], out: &mut [f64]) {
        out[0] = 0.2 * sech2(x[0]);
    }
    fn diffusion_u(&self, _: f64, _: &[f64], _: &[f64], out: &mut [f64]) {
        out[0] = 0.2;
    }
    fn generator_x(&self, _: f64, x: &[f64], _: f64, z: &[f64], u: &[f64], out: &mut [f64]) {
        out[0] = (0.3 * z[0] + 0.1 * u[0]) * sech2(x[0]);
    }
    fn generator_y(&self, _: f64, _: &[f64], _: f64, _: &[f64], _: &[f64]) -> f64 {
        -0.2
    }
    fn generator_z(&self, _: f64, x: &[f64], _: f64, z: &[f64], _: &[f64], out: &mut [f64]) {
        out[0] = 0.5 * z[0] + 0.3 * x[0].tanh();
    }
    fn generator_u(&self, _: f64, x: &[f64], _: f64, _: &[f64], u: &[f64], out: &mut [f64]) {
        out[0] = 0.5 * u[0] + 0.1 * x[0].tanh();
    }
    fn terminal_x(&self, x: &[f64], out: &mut [f64]) {
        out[0] = x[0].cos();
    }
}

pub fn tanh_family(x0: f64, horizon: f64) -> ProblemSpec {
    let constants = AssumptionConstants {
        alpha: 0.35,
        gamma: 0.5,
        l1: 0.3,
        l2: 0.3,
        l3: 0.5,
        f_y_sup: 0.2,
        phi_sup: 1.0,
        phi_x_sup: 1.0,
        b_x_sup: 0.5,
        b_u_sup: 1.0,
        sigma_x_sup: vec![0.2],
        sigma_u_sup: 0.2,
    };
    ProblemSpec::new(Dims { n: 1, d: 1, k: 1 }, horizon, vec![x0], Arc::new(TanhFamily), unit_box(1), constants)
        .expect("tanh family parameters are valid")
}

/// Registered family names.
pub const FAMILY_NAMES: [&str; 3] = ["exponential-utility", "linear-quadratic", "tanh"];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{derive_constants, validate_assumptions, SampleRegion};

    #[test]
    fn shipped_families_validate() {
        for spec in [
            exponential_utility(1.0, 0.0, 1.0),
            linear_quadratic(LinearQuadratic::default(), 1.0, 1.0),
            tanh_family(0.0, 1.0),
        ] {
            let r = validate_assumptions(&spec, 2000, &SampleRegion::default()).unwrap();
            assert!(r.all_passed(), "{:#?}", r.checks.iter().filter(|c| !c.passed).collect::<Vec<_>>());
            derive_constants(&spec).unwrap();
        }
    }

    #[test]
    fn exponential_utility_constants() {
        let dc = derive_constants(&exponential_utility(1.0, 0.0, 1.0)).unwrap();
        assert_eq!(dc.alpha_tilde, 1.0);
        assert!((dc.a - (1.0 + 0.5 * 4f64.exp() * 1.25)).abs() < 1e-12);
    }

    #[test]
    fn riccati_scalar_closed_form() {
        // a = s = 0, b = q = r = g = 1: P(t) = 1 for all t (P' = -1 + P^2 = 0 at P = 1)
        let p = LinearQuadratic { a: 0.0, b: 1.0, s: 0.0, q: 1.0, r: 1.0, g: 1.0 };
        assert!(riccati(&p, 1.0, 10).iter().all(|v| (v - 1.0).abs() < 1e-12));
        // q = 0, b = 0: P(0) = g exp((2a + s^2) T)
        let p = LinearQuadratic { a: 0.3, b: 0.0, s: 0.4, q: 0.0, r: 1.0, g: 2.0 };
        let v = riccati(&p, 1.0, 1)[0];
        assert!((v - 2.0 * (0.6f64 + 0.16).exp()).abs() < 1e-10);
    }

    #[test]
    fn discrete_riccati_approaches_continuous() {
        let p = LinearQuadratic::default();
        let c = riccati(&p, 1.0, 1)[0];
        let e1 = (discrete_riccati(&p, 1.0, 100).0[0] - c).abs();
        let e2 = (discrete_riccati(&p, 1.0, 200).0[0] - c).abs();
        assert!(e2 < e1 && e2 < 0.01);
    }
}
