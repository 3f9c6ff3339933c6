//! Experiment configuration: a TOML document with the sections below.
//! Every section except `problem`, `grid` and `monte_carlo` is optional.
//!
//! ```toml
//! pipeline = "solve"            # optional; must match the subcommand
//!
//! [problem]
//! family = "exponential-utility"  # or "linear-quadratic", "tanh", "inline"
//! gamma = 1.0                     # family parameters
//! x0 = [0.0]
//!
//! [grid]
//! steps = 100
//! horizon = 1.0
//!
//! [monte_carlo]
//! paths = 100000
//! seed = 1
//! ```
//!
//! Inline problems declare `n`, `d`, `k`, `x0`, the expressions `drift`
//! (list of `n`), `diffusion` (`n` rows of `d`), `generator` and
//! `terminal`, plus `[problem.domain]` and `[problem.constants]`.

use std::fmt;
use std::sync::Arc;

use qsmp::bsde::BsdeOptions;
use qsmp::families::{self, LinearQuadratic};
use qsmp::model::{AssumptionConstants, Coefficients, ControlDomain, Dims, ProblemSpec, SampleRegion};
use qsmp::paths::{AffineFeedback, Control, FnFeedback, TimeGrid};
use qsmp::smp::{DescentOptions, MpCheckOptions, DEFAULT_EPSILONS};
use serde::Deserialize;

use crate::expr::{parse_in, Env, Expr, ParseError, Scope, Var};

/// Where a configuration error was found.
#[derive(Debug, Clone, PartialEq)]
pub enum Location {
    Text { line: usize, column: usize },
    Key(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub location: Location,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.location {
            Location::Text { line, column } => write!(f, "line {line}, column {column}: {}", self.message),
            Location::Key(k) => write!(f, "`{k}`: {}", self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

fn key_error(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError { location: Location::Key(key.to_string()), message: message.into() }
}

fn expr_error(key: &str, e: ParseError) -> ConfigError {
    key_error(key, format!("expression {e}"))
}

fn line_col(src: &str, offset: usize) -> (usize, usize) {
    let offset = offset.min(src.len());
    let before = &src[..offset];
    let line = before.matches('\n').count() + 1;
    let column = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, column)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pipeline {
    Solve,
    Adjoint,
    GradientCheck,
    Descend,
    MpCheck,
    Bmo,
    Constants,
}

impl Pipeline {
    pub const ALL: [Pipeline; 7] = [
        Pipeline::Solve,
        Pipeline::Adjoint,
        Pipeline::GradientCheck,
        Pipeline::Descend,
        Pipeline::MpCheck,
        Pipeline::Bmo,
        Pipeline::Constants,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Pipeline::Solve => "solve",
            Pipeline::Adjoint => "adjoint",
            Pipeline::GradientCheck => "gradient-check",
            Pipeline::Descend => "descend",
            Pipeline::MpCheck => "mp-check",
            Pipeline::Bmo => "bmo",
            Pipeline::Constants => "constants",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    pipeline: Option<String>,
    problem: RawProblem,
    grid: RawGrid,
    monte_carlo: RawMonteCarlo,
    #[serde(default)]
    solver: RawSolver,
    control: Option<RawControl>,
    direction: Option<RawControl>,
    #[serde(default)]
    gradient_check: RawGradientCheck,
    #[serde(default)]
    descent: RawDescent,
    #[serde(default)]
    mp_check: RawMpCheck,
    #[serde(default)]
    bmo: RawBmo,
    #[serde(default)]
    validation: RawValidation,
    #[serde(default)]
    output: RawOutput,
    #[serde(default)]
    tolerances: RawTolerances,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawProblem {
    family: String,
    x0: Option<Vec<f64>>,
    gamma: Option<f64>,
    a: Option<f64>,
    b: Option<f64>,
    s: Option<f64>,
    q: Option<f64>,
    r: Option<f64>,
    g: Option<f64>,
    n: Option<usize>,
    d: Option<usize>,
    k: Option<usize>,
    drift: Option<String>,
    diffusion: Option<String>,
    generator: Option<String>,
    terminal: Option<String>,
    domain: Option<ControlDomain>,
    constants: Option<AssumptionConstants>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGrid {
    steps: usize,
    horizon: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMonteCarlo {
    paths: usize,
    seed: u64,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSolver {
    degree: Option<usize>,
    truncation_radius: Option<f64>,
    ridge: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawControl {
    kind: String,
    value: Option<Vec<f64>>,
    offset: Option<Vec<f64>>,
    gain: Option<Vec<f64>>,
    u: Option<String>,
    scale: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGradientCheck {
    epsilons: Option<Vec<f64>>,
    fit_degree: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDescent {
    step: Option<f64>,
    decay: Option<f64>,
    max_iters: Option<usize>,
    patience: Option<usize>,
    offset: Option<Vec<f64>>,
    gain: Option<Vec<f64>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMpCheck {
    times: Option<usize>,
    paths_per_time: Option<usize>,
    candidates_per_point: Option<usize>,
    sections: Option<usize>,
    boundary_fraction: Option<f64>,
    seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBmo {
    n_max: Option<u32>,
    reverse_holder_fraction: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawValidation {
    samples: Option<usize>,
    x_radius: Option<f64>,
    y_radius: Option<f64>,
    z_radius: Option<f64>,
    u_radius: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOutput {
    dir: Option<String>,
    format: Option<Format>,
    save_paths: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTolerances {
    sigmas: Option<f64>,
    mp_tolerance_se: Option<f64>,
    mp_tolerance_floor: Option<f64>,
    mp_violation_fraction: Option<f64>,
}

/// A control law before it is bound to a grid.
#[derive(Debug, Clone, PartialEq)]
pub enum ControlChoice {
    Constant(Vec<f64>),
    /// Constant-in-time affine feedback `offset + gain x`, `gain` is `k x n`.
    Affine {
        offset: Vec<f64>,
        gain: Vec<f64>,
    },
    /// Feedback expression list in `(t, x)`, projected onto the domain.
    Expression(Expr),
    /// Continuous Riccati gains of the linear-quadratic family, times `scale`.
    Riccati {
        scale: f64,
    },
}

#[derive(Debug, Clone)]
pub struct GradientCheckSettings {
    pub epsilons: Vec<f64>,
    pub fit_degree: usize,
}

#[derive(Debug, Clone)]
pub struct BmoSettings {
    pub n_max: u32,
    pub reverse_holder_fraction: f64,
}

#[derive(Debug, Clone)]
pub struct Tolerances {
    pub sigmas: f64,
    pub mp_violation_fraction: f64,
}

#[derive(Debug, Clone)]
pub struct ValidationSettings {
    pub samples: usize,
    pub region: SampleRegion,
}

/// A validated experiment.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub pipeline: Option<Pipeline>,
    pub family: String,
    pub spec: ProblemSpec,
    /// Present for the linear-quadratic family.
    pub lq: Option<LinearQuadratic>,
    pub grid: TimeGrid,
    pub paths: usize,
    pub seed: u64,
    pub solver: BsdeOptions,
    pub control: ControlChoice,
    pub direction: ControlChoice,
    pub gradient_check: GradientCheckSettings,
    pub descent: DescentOptions,
    pub descent_init: (Vec<f64>, Vec<f64>),
    pub mp_check: MpCheckOptions,
    pub bmo: BmoSettings,
    pub validation: ValidationSettings,
    pub output_dir: Option<String>,
    pub format: Format,
    pub save_paths: bool,
    pub tolerances: Tolerances,
}

fn positive(key: &str, v: f64) -> Result<f64, ConfigError> {
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(key_error(key, format!("must be a positive finite number, got {v}")))
    }
}

fn non_negative(key: &str, v: f64) -> Result<f64, ConfigError> {
    if v.is_finite() && v >= 0.0 {
        Ok(v)
    } else {
        Err(key_error(key, format!("must be a non-negative finite number, got {v}")))
    }
}

fn finite_vec(key: &str, v: &[f64], len: usize) -> Result<(), ConfigError> {
    if v.len() != len {
        return Err(key_error(key, format!("expected {len} values, got {}", v.len())));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(key_error(key, "values must be finite"));
    }
    Ok(())
}

pub fn parse_config(src: &str) -> Result<ExperimentConfig, ConfigError> {
    let raw: RawConfig = toml::from_str(src).map_err(|e| {
        let (line, column) = line_col(src, e.span().map_or(0, |s| s.start));
        ConfigError { location: Location::Text { line, column }, message: e.message().to_string() }
    })?;
    let pipeline = match &raw.pipeline {
        None => None,
        Some(name) => Some(Pipeline::from_name(name).ok_or_else(|| {
            let names: Vec<&str> = Pipeline::ALL.iter().map(|p| p.name()).collect();
            key_error("pipeline", format!("unknown pipeline `{name}` (expected one of {})", names.join(", ")))
        })?),
    };
    let grid = TimeGrid::new(raw.grid.steps, positive("grid.horizon", raw.grid.horizon)?)
        .map_err(|e| key_error("grid.steps", e.to_string()))?;
    if raw.monte_carlo.paths < 2 {
        return Err(key_error("monte_carlo.paths", "at least 2 paths are required"));
    }
    let (spec, lq) = build_problem(&raw.problem, grid.horizon)?;
    let Dims { n, k, .. } = spec.dims;

    let mut solver = BsdeOptions::default();
    if let Some(d) = raw.solver.degree {
        if d > 8 {
            return Err(key_error("solver.degree", "degree must be at most 8"));
        }
        solver.degree = d;
    }
    if let Some(r) = raw.solver.truncation_radius {
        solver.truncation_radius = Some(positive("solver.truncation_radius", r)?);
    }
    if let Some(r) = raw.solver.ridge {
        solver.ridge = Some(non_negative("solver.ridge", r)?);
    }

    let control = match &raw.control {
        Some(c) => build_control("control", c, &spec, lq.is_some())?,
        None => ControlChoice::Constant(vec![0.0; k]),
    };
    let direction = match &raw.direction {
        Some(c) => build_control("direction", c, &spec, lq.is_some())?,
        None => ControlChoice::Constant(vec![0.0; k]),
    };

    let epsilons = raw.gradient_check.epsilons.clone().unwrap_or_else(|| DEFAULT_EPSILONS.to_vec());
    if epsilons.len() < 2 || epsilons.iter().any(|e| !(e.is_finite() && *e > 0.0 && *e <= 1.0)) {
        return Err(key_error("gradient_check.epsilons", "need at least two values in (0, 1]"));
    }
    let fit_degree = raw.gradient_check.fit_degree.unwrap_or(2);
    if fit_degree + 1 > epsilons.len() {
        return Err(key_error("gradient_check.fit_degree", "needs more epsilons than fit_degree"));
    }

    let mut descent = DescentOptions::default();
    let d = &raw.descent;
    if let Some(v) = d.step {
        descent.step = positive("descent.step", v)?;
    }
    if let Some(v) = d.decay {
        descent.decay = non_negative("descent.decay", v)?;
    }
    if let Some(v) = d.max_iters {
        descent.max_iters = v;
    }
    if let Some(v) = d.patience {
        if v == 0 {
            return Err(key_error("descent.patience", "must be at least 1"));
        }
        descent.patience = v;
    }
    descent.bsde.truncation_radius = solver.truncation_radius;
    descent.bsde.ridge = solver.ridge;
    let offset = d.offset.clone().unwrap_or_else(|| vec![0.0; k]);
    finite_vec("descent.offset", &offset, k)?;
    let gain = d.gain.clone().unwrap_or_else(|| vec![0.0; k * n]);
    finite_vec("descent.gain", &gain, k * n)?;

    let mut mp = MpCheckOptions::default();
    let r = &raw.mp_check;
    mp.times = r.times.unwrap_or(mp.times);
    mp.paths_per_time = r.paths_per_time.unwrap_or(mp.paths_per_time);
    mp.candidates_per_point = r.candidates_per_point.unwrap_or(mp.candidates_per_point);
    mp.sections = r.sections.unwrap_or(mp.sections);
    mp.seed = r.seed.unwrap_or(mp.seed);
    if let Some(b) = r.boundary_fraction {
        if !(0.0..=1.0).contains(&b) {
            return Err(key_error("mp_check.boundary_fraction", "must lie in [0, 1]"));
        }
        mp.boundary_fraction = b;
    }
    if mp.times == 0 || mp.paths_per_time == 0 || mp.candidates_per_point == 0 {
        return Err(key_error("mp_check", "times, paths_per_time and candidates_per_point must be >= 1"));
    }
    if mp.sections < 2 {
        return Err(key_error("mp_check.sections", "at least 2 sections are required"));
    }
    if let Some(v) = raw.tolerances.mp_tolerance_se {
        mp.tolerance_se = non_negative("tolerances.mp_tolerance_se", v)?;
    }
    if let Some(v) = raw.tolerances.mp_tolerance_floor {
        mp.tolerance_floor = non_negative("tolerances.mp_tolerance_floor", v)?;
    }
    mp.bsde.truncation_radius = solver.truncation_radius;
    mp.bsde.ridge = solver.ridge;
    // descent and the MP check default to a cheaper basis unless one is set
    if let Some(deg) = raw.solver.degree {
        descent.bsde.degree = deg;
        mp.bsde.degree = deg;
    }

    let bmo = BmoSettings {
        n_max: raw.bmo.n_max.unwrap_or(3),
        reverse_holder_fraction: raw.bmo.reverse_holder_fraction.unwrap_or(0.9),
    };
    if !(1..=6).contains(&bmo.n_max) {
        return Err(key_error("bmo.n_max", "must lie in 1..=6"));
    }
    if !(bmo.reverse_holder_fraction > 0.0 && bmo.reverse_holder_fraction < 1.0) {
        return Err(key_error("bmo.reverse_holder_fraction", "must lie in (0, 1)"));
    }

    let v = &raw.validation;
    let mut region = SampleRegion::default();
    region.x_radius = positive("validation.x_radius", v.x_radius.unwrap_or(region.x_radius))?;
    region.y_radius = positive("validation.y_radius", v.y_radius.unwrap_or(region.y_radius))?;
    region.z_radius = positive("validation.z_radius", v.z_radius.unwrap_or(region.z_radius))?;
    region.u_radius = positive("validation.u_radius", v.u_radius.unwrap_or(region.u_radius))?;
    let validation = ValidationSettings { samples: v.samples.unwrap_or(2000).max(1), region };

    let tolerances = Tolerances {
        sigmas: positive("tolerances.sigmas", raw.tolerances.sigmas.unwrap_or(3.0))?,
        mp_violation_fraction: raw.tolerances.mp_violation_fraction.unwrap_or(0.01),
    };
    if !(0.0..=1.0).contains(&tolerances.mp_violation_fraction) {
        return Err(key_error("tolerances.mp_violation_fraction", "must lie in [0, 1]"));
    }

    Ok(ExperimentConfig {
        pipeline,
        family: raw.problem.family.clone(),
        spec,
        lq,
        grid,
        paths: raw.monte_carlo.paths,
        seed: raw.monte_carlo.seed,
        solver,
        control,
        direction,
        gradient_check: GradientCheckSettings { epsilons, fit_degree },
        descent,
        descent_init: (offset, gain),
        mp_check: mp,
        bmo,
        validation,
        output_dir: raw.output.dir.clone(),
        format: raw.output.format.unwrap_or(Format::Csv),
        save_paths: raw.output.save_paths.unwrap_or(false),
        tolerances,
    })
}

fn scalar_x0(p: &RawProblem) -> Result<f64, ConfigError> {
    match p.x0.as_deref() {
        None => Ok(0.0),
        Some([v]) if v.is_finite() => Ok(*v),
        Some(_) => Err(key_error("problem.x0", "this family has a one-dimensional finite state")),
    }
}

fn reject_fields(p: &RawProblem, family: &str, allowed: &[&str]) -> Result<(), ConfigError> {
    let present = [
        ("gamma", p.gamma.is_some()),
        ("a", p.a.is_some()),
        ("b", p.b.is_some()),
        ("s", p.s.is_some()),
        ("q", p.q.is_some()),
        ("r", p.r.is_some()),
        ("g", p.g.is_some()),
        ("n", p.n.is_some()),
        ("d", p.d.is_some()),
        ("k", p.k.is_some()),
        ("drift", p.drift.is_some()),
        ("diffusion", p.diffusion.is_some()),
        ("generator", p.generator.is_some()),
        ("terminal", p.terminal.is_some()),
        ("domain", p.domain.is_some()),
        ("constants", p.constants.is_some()),
    ];
    for (name, set) in present {
        if set && !allowed.contains(&name) {
            return Err(key_error(&format!("problem.{name}"), format!("not a parameter of family `{family}`")));
        }
    }
    Ok(())
}

fn build_problem(p: &RawProblem, horizon: f64) -> Result<(ProblemSpec, Option<LinearQuadratic>), ConfigError> {
    let invalid = |e: qsmp::Error| key_error("problem", e.to_string());
    match p.family.as_str() {
        "exponential-utility" => {
            reject_fields(p, &p.family, &["gamma"])?;
            let gamma = positive("problem.gamma", p.gamma.unwrap_or(1.0))?;
            Ok((families::exponential_utility(gamma, scalar_x0(p)?, horizon), None))
        }
        "linear-quadratic" => {
            reject_fields(p, &p.family, &["a", "b", "s", "q", "r", "g"])?;
            let d = LinearQuadratic::default();
            let get = |key: &str, v: Option<f64>, def: f64| -> Result<f64, ConfigError> {
                let v = v.unwrap_or(def);
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(key_error(&format!("problem.{key}"), "must be finite"))
                }
            };
            let lq = LinearQuadratic {
                a: get("a", p.a, d.a)?,
                b: get("b", p.b, d.b)?,
                s: get("s", p.s, d.s)?,
                q: non_negative("problem.q", p.q.unwrap_or(d.q))?,
                r: positive("problem.r", p.r.unwrap_or(d.r))?,
                g: non_negative("problem.g", p.g.unwrap_or(d.g))?,
            };
            Ok((families::linear_quadratic(lq, scalar_x0(p)?, horizon), Some(lq)))
        }
        "tanh" => {
            reject_fields(p, &p.family, &[])?;
            Ok((families::tanh_family(scalar_x0(p)?, horizon), None))
        }
        "inline" => {
            reject_fields(
                p,
                &p.family,
                &["n", "d", "k", "drift", "diffusion", "generator", "terminal", "domain", "constants"],
            )?;
            let need = |key: &str, v: Option<usize>| -> Result<usize, ConfigError> {
                match v {
                    Some(v) if (1..=16).contains(&v) => Ok(v),
                    Some(_) => Err(key_error(&format!("problem.{key}"), "must lie in 1..=16")),
                    None => Err(key_error(&format!("problem.{key}"), "required for inline problems")),
                }
            };
            let dims = Dims { n: need("n", p.n)?, d: need("d", p.d)?, k: need("k", p.k)? };
            let text = |key: &str, v: &Option<String>| -> Result<String, ConfigError> {
                v.clone().ok_or_else(|| key_error(&format!("problem.{key}"), "required for inline problems"))
            };
            let coeffs = ExprCoefficients::new(
                dims,
                &text("drift", &p.drift)?,
                &text("diffusion", &p.diffusion)?,
                &text("generator", &p.generator)?,
                &text("terminal", &p.terminal)?,
            )?;
            let x0 = p.x0.clone().ok_or_else(|| key_error("problem.x0", "required for inline problems"))?;
            finite_vec("problem.x0", &x0, dims.n)?;
            let domain = p.domain.clone().ok_or_else(|| key_error("problem.domain", "required for inline problems"))?;
            domain.validate(dims.k).map_err(|e| key_error("problem.domain", e.to_string()))?;
            let constants =
                p.constants.clone().ok_or_else(|| key_error("problem.constants", "required for inline problems"))?;
            constants.validate(dims.d).map_err(|e| key_error("problem.constants", e.to_string()))?;
            let spec = ProblemSpec::new(dims, horizon, x0, Arc::new(coeffs), domain, constants).map_err(invalid)?;
            Ok((spec, None))
        }
        other => {
            let mut names = families::FAMILY_NAMES.to_vec();
            names.push("inline");
            Err(key_error("problem.family", format!("unknown family `{other}` (expected one of {})", names.join(", "))))
        }
    }
}

fn build_control(key: &str, c: &RawControl, spec: &ProblemSpec, is_lq: bool) -> Result<ControlChoice, ConfigError> {
    let Dims { n, k, .. } = spec.dims;
    let field = |name: &str| format!("{key}.{name}");
    let allowed: &[&str] = match c.kind.as_str() {
        "constant" => &["value"],
        "affine" => &["offset", "gain"],
        "expression" => &["u"],
        "riccati" => &["scale"],
        other => {
            return Err(key_error(
                &field("kind"),
                format!("unknown control kind `{other}` (expected constant, affine, expression or riccati)"),
            ))
        }
    };
    for (name, set) in [
        ("value", c.value.is_some()),
        ("offset", c.offset.is_some()),
        ("gain", c.gain.is_some()),
        ("u", c.u.is_some()),
        ("scale", c.scale.is_some()),
    ] {
        if set && !allowed.contains(&name) {
            return Err(key_error(&field(name), format!("not used by control kind `{}`", c.kind)));
        }
    }
    match c.kind.as_str() {
        "constant" => {
            let v = c.value.clone().ok_or_else(|| key_error(&field("value"), "required"))?;
            finite_vec(&field("value"), &v, k)?;
            Ok(ControlChoice::Constant(v))
        }
        "affine" => {
            let offset = c.offset.clone().unwrap_or_else(|| vec![0.0; k]);
            finite_vec(&field("offset"), &offset, k)?;
            let gain = c.gain.clone().unwrap_or_else(|| vec![0.0; k * n]);
            finite_vec(&field("gain"), &gain, k * n)?;
            Ok(ControlChoice::Affine { offset, gain })
        }
        "expression" => {
            let src = c.u.as_deref().ok_or_else(|| key_error(&field("u"), "required"))?;
            let e = parse_in(src, &Scope::feedback(n)).map_err(|e| expr_error(&field("u"), e))?;
            let items = list_of(&e, k).map_err(|m| key_error(&field("u"), m))?;
            Ok(ControlChoice::Expression(Expr::List(items)))
        }
        _ => {
            if !is_lq {
                return Err(key_error(&field("kind"), "riccati controls need the linear-quadratic family"));
            }
            let scale = c.scale.unwrap_or(1.0);
            if !scale.is_finite() {
                return Err(key_error(&field("scale"), "must be finite"));
            }
            Ok(ControlChoice::Riccati { scale })
        }
    }
}

impl ControlChoice {
    /// Binds the law to a grid; feedback values are projected onto `U`.
    pub fn to_control(&self, spec: &ProblemSpec, grid: &TimeGrid, lq: Option<&LinearQuadratic>) -> Control {
        let domain = spec.domain.clone();
        match self {
            ControlChoice::Constant(v) => Control::constant(domain.project(v)),
            ControlChoice::Affine { offset, gain } => {
                Control::feedback(AffineFeedback::constant_in_time(grid.steps, offset, gain, Some(domain)))
            }
            ControlChoice::Expression(e) => {
                let Expr::List(items) = e.clone() else { unreachable!("expression controls are lists") };
                Control::feedback(FnFeedback(move |_step: usize, t: f64, x: &[f64], out: &mut [f64]| {
                    let env = Env { t, x, ..Env::default() };
                    for (o, item) in out.iter_mut().zip(&items) {
                        *o = item.eval_or_nan(&env);
                    }
                    domain.project_in_place(out);
                }))
            }
            ControlChoice::Riccati { scale } => {
                let p = lq.copied().unwrap_or_default();
                let gains = families::riccati_gains(&p, spec.horizon, grid.steps);
                let mut fb = AffineFeedback::constant_in_time(grid.steps, &[0.0], &[0.0], Some(domain));
                for (g, v) in fb.gain.iter_mut().zip(&gains) {
                    *g = scale * v;
                }
                Control::feedback(fb)
            }
        }
    }
}

/// Scalars or a flat list of exactly `len` scalars.
fn list_of(e: &Expr, len: usize) -> Result<Vec<Expr>, String> {
    match e {
        Expr::List(items) => {
            if items.len() != len {
                return Err(format!("expected a list of {len} entries, got {}", items.len()));
            }
            if items.iter().any(|i| matches!(i, Expr::List(_))) {
                return Err("entries must be scalars".into());
            }
            Ok(items.clone())
        }
        scalar if len == 1 => Ok(vec![scalar.clone()]),
        _ => Err(format!("expected a list of {len} entries")),
    }
}

/// Coefficients given by expressions, with symbolically differentiated
/// derivatives. Evaluation errors surface as NaN, which the solvers reject.
#[derive(Debug, Clone)]
pub struct ExprCoefficients {
    dims: Dims,
    drift: Vec<Expr>,
    /// `n x d`, row-major.
    diffusion: Vec<Expr>,
    generator: Expr,
    terminal: Expr,
    drift_x: Vec<Expr>,
    drift_u: Vec<Expr>,
    diffusion_x: Vec<Expr>,
    diffusion_u: Vec<Expr>,
    generator_x: Vec<Expr>,
    generator_y: Expr,
    generator_z: Vec<Expr>,
    generator_u: Vec<Expr>,
    terminal_x: Vec<Expr>,
}

fn derivative(key: &str, e: &Expr, v: Var) -> Result<Expr, ConfigError> {
    e.diff(v).map_err(|err| key_error(key, err.to_string()))
}

impl ExprCoefficients {
    pub fn new(dims: Dims, drift: &str, diffusion: &str, generator: &str, terminal: &str) -> Result<Self, ConfigError> {
        let Dims { n, d, k } = dims;
        let sc = Scope::state_control(n, k);
        let drift_e = parse_in(drift, &sc).map_err(|e| expr_error("problem.drift", e))?;
        let drift = list_of(&drift_e, n).map_err(|m| key_error("problem.drift", m))?;
        let diff_e = parse_in(diffusion, &sc).map_err(|e| expr_error("problem.diffusion", e))?;
        let diffusion = matrix_of(&diff_e, n, d).map_err(|m| key_error("problem.diffusion", m))?;
        let generator = parse_in(generator, &Scope::full(n, d, k)).map_err(|e| expr_error("problem.generator", e))?;
        if matches!(generator, Expr::List(_)) {
            return Err(key_error("problem.generator", "must be a scalar expression"));
        }
        let terminal = parse_in(terminal, &Scope::terminal(n)).map_err(|e| expr_error("problem.terminal", e))?;
        if matches!(terminal, Expr::List(_)) {
            return Err(key_error("problem.terminal", "must be a scalar expression"));
        }

        let mut drift_x = Vec::with_capacity(n * n);
        let mut drift_u = Vec::with_capacity(n * k);
        for b in &drift {
            for c in 0..n {
                drift_x.push(derivative("problem.drift", b, Var::X(c))?);
            }
            for l in 0..k {
                drift_u.push(derivative("problem.drift", b, Var::U(l))?);
            }
        }
        let mut diffusion_x = Vec::with_capacity(d * n * n);
        let mut diffusion_u = Vec::with_capacity(d * n * k);
        for j in 0..d {
            for r in 0..n {
                let s = &diffusion[r * d + j];
                for c in 0..n {
                    diffusion_x.push(derivative("problem.diffusion", s, Var::X(c))?);
                }
                for l in 0..k {
                    diffusion_u.push(derivative("problem.diffusion", s, Var::U(l))?);
                }
            }
        }
        let g = &generator;
        let generator_x = (0..n).map(|c| derivative("problem.generator", g, Var::X(c))).collect::<Result<_, _>>()?;
        let generator_y = derivative("problem.generator", g, Var::Y)?;
        let generator_z = (0..d).map(|j| derivative("problem.generator", g, Var::Z(j))).collect::<Result<_, _>>()?;
        let generator_u = (0..k).map(|l| derivative("problem.generator", g, Var::U(l))).collect::<Result<_, _>>()?;
        let terminal_x =
            (0..n).map(|c| derivative("problem.terminal", &terminal, Var::X(c))).collect::<Result<_, _>>()?;
        Ok(Self {
            dims,
            drift,
            diffusion,
            generator,
            terminal,
            drift_x,
            drift_u,
            diffusion_x,
            diffusion_u,
            generator_x,
            generator_y,
            generator_z,
            generator_u,
            terminal_x,
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    /// Every expression with its role, for round-trip checks and summaries.
    pub fn expressions(&self) -> Vec<(&'static str, &Expr)> {
        let mut out: Vec<(&'static str, &Expr)> = self.drift.iter().map(|e| ("drift", e)).collect();
        out.extend(self.diffusion.iter().map(|e| ("diffusion", e)));
        out.push(("generator", &self.generator));
        out.push(("terminal", &self.terminal));
        out
    }
}

fn matrix_of(e: &Expr, rows: usize, cols: usize) -> Result<Vec<Expr>, String> {
    if rows == 1 && cols == 1 {
        return match e {
            Expr::List(items) if items.len() == 1 => match &items[0] {
                Expr::List(inner) => list_of(&Expr::List(inner.clone()), 1),
                s => Ok(vec![s.clone()]),
            },
            Expr::List(_) => Err("expected a 1 x 1 matrix".into()),
            s => Ok(vec![s.clone()]),
        };
    }
    let Expr::List(rs) = e else { return Err(format!("expected {rows} rows of {cols} entries")) };
    if rs.len() != rows {
        return Err(format!("expected {rows} rows, got {}", rs.len()));
    }
    let mut out = Vec::with_capacity(rows * cols);
    for r in rs {
        out.extend(list_of(r, cols)?);
    }
    Ok(out)
}

fn fill(exprs: &[Expr], env: &Env<'_>, out: &mut [f64]) {
    for (o, e) in out.iter_mut().zip(exprs) {
        *o = e.eval_or_nan(env);
    }
}

impl Coefficients for ExprCoefficients {
    fn drift(&self, t: f64, x: &[f64], u: &[f64], out: &mut [f64]) {
        fill(&self.drift, &Env { t, x, u, ..Env::default() }, out);
    }
    fn diffusion(&self, t: f64, x: &[f64], u: &[f64], out: &mut [f64]) {
        fill(&self.diffusion, &Env { t, x, u, ..Env::default() }, out);
    }
    fn generator(&self, t: f64, x: &[f64], y: f64, z: &[f64], u: &[f64]) -> f64 {
        self.generator.eval_or_nan(&Env { t, x, y, z, u })
    }
    fn terminal(&self, x: &[f64]) -> f64 {
        self.terminal.eval_or_nan(&Env { x, ..Env::default() })
    }
    fn drift_x(&self, t: f64, x: &[f64], u: &[f64], out: &mut [f64]) {
        fill(&self.drift_x, &Env { t, x, u, ..Env::default() }, out);
    }
    fn drift_u(&self, t: f64, x: &[f64], u: &[f64], out: &mut [f64]) {
        fill(&self.drift_u, &Env { t, x, u, ..Env::default() }, out);
    }
    fn diffusion_x(&self, t: f64, x: &[f64], u: &[f64], out: &mut [f64]) {
        fill(&self.diffusion_x, &Env { t, x, u, ..Env::default() }, out);
    }
    fn diffusion_u(&self, t: f64, x: &[f64], u: &[f64], out: &mut [f64]) {
        fill(&self.diffusion_u, &Env { t, x, u, ..Env::default() }, out);
    }
    fn generator_x(&self, t: f64, x: &[f64], y: f64, z: &[f64], u: &[f64], out: &mut [f64]) {
        fill(&self.generator_x, &Env { t, x, y, z, u }, out);
    }
    fn generator_y(&self, t: f64, x: &[f64], y: f64, z: &[f64], u: &[f64]) -> f64 {
        self.generator_y.eval_or_nan(&Env { t, x, y, z, u })
    }
    fn generator_z(&self, t: f64, x: &[f64], y: f64, z: &[f64], u: &[f64], out: &mut [f64]) {
        fill(&self.generator_z, &Env { t, x, y, z, u }, out);
    }
    fn generator_u(&self, t: f64, x: &[f64], y: f64, z: &[f64], u: &[f64], out: &mut [f64]) {
        fill(&self.generator_u, &Env { t, x, y, z, u }, out);
    }
    fn terminal_x(&self, x: &[f64], out: &mut [f64]) {
        fill(&self.terminal_x, &Env { x, ..Env::default() }, out);
    }
}
