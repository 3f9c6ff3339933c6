//! Pipeline execution and artifact writing.
//!
//! Every run writes, into the output directory, one result file in the
//! requested format, pipeline-specific extra tables, `summary.txt`, and
//! finally `manifest.json` listing the SHA-256 of every artifact. Files are
//! written to a temporary name and renamed into place.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use qsmp::bmo::{bmo_report, reverse_holder_check};
use qsmp::bsde::{estimate_apriori_bound, solve_quadratic_bsde, BackwardSolution, Conditioning};
use qsmp::families;
use qsmp::io::write_batch;
use qsmp::model::{derive_constants, validate_assumptions};
use qsmp::paths::{simulate_brownian, solve_forward_sde, AffineFeedback, ForwardBatch, TimeGrid};
use qsmp::smp::{
    check_maximum_principle, gateaux_check, projected_gradient_descent, solve_candidate, DescentStatus, GateauxOptions,
    Verdict,
};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::{parse_config, ConfigError, ExperimentConfig, Format, Pipeline};

pub const EXIT_OK: i32 = 0;
pub const EXIT_SOLVER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_CHECK: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("config error: {0}")]
    Config(#[from] ConfigError),
    #[error("solver error: {0}")]
    Solver(#[from] qsmp::Error),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => EXIT_CONFIG,
            RunError::Solver(_) | RunError::Io { .. } => EXIT_SOLVER,
        }
    }
}

/// Outcome of the check a pipeline performs, if any.
#[derive(Debug, Clone, PartialEq)]
pub enum CheckStatus {
    Pass,
    /// The statistics could not resolve the check, or it failed.
    NotPassed(String),
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub pipeline: Pipeline,
    pub out_dir: PathBuf,
    pub files: Vec<String>,
    pub status: CheckStatus,
}

impl RunReport {
    pub fn exit_code(&self) -> i32 {
        match self.status {
            CheckStatus::Pass => EXIT_OK,
            CheckStatus::NotPassed(_) => EXIT_CHECK,
        }
    }
}

/// Command-line overrides.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub format: Option<Format>,
}

struct Artifacts {
    files: Vec<(String, Vec<u8>)>,
    summary: String,
    status: CheckStatus,
}

impl Artifacts {
    fn new() -> Self {
        Self { files: Vec::new(), summary: String::new(), status: CheckStatus::Pass }
    }

    fn add(&mut self, name: &str, bytes: impl Into<Vec<u8>>) {
        self.files.push((name.to_string(), bytes.into()));
    }

    fn line(&mut self, s: impl AsRef<str>) {
        self.summary.push_str(s.as_ref());
        self.summary.push('\n');
    }

    fn fail(&mut self, why: impl Into<String>) {
        if self.status == CheckStatus::Pass {
            self.status = CheckStatus::NotPassed(why.into());
        }
    }
}

/// Result table in the configured format: CSV from `header` and `rows`, or
/// the JSON `value`.
fn add_result(a: &mut Artifacts, format: Format, csv: String, value: &Value) {
    match format {
        Format::Csv => a.add("result.csv", csv),
        Format::Json => a.add("result.json", pretty(value)),
    }
}

fn pretty(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("JSON values serialize");
    s.push('\n');
    s
}

fn to_value<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("report types serialize")
}

/// RFC 4180 field quoting.
pub fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn write_atomic(dir: &Path, name: &str, bytes: &[u8]) -> Result<(), RunError> {
    let target = dir.join(name);
    let tmp = dir.join(format!(".{name}.tmp"));
    let io = |source| RunError::Io { path: target.clone(), source };
    fs::write(&tmp, bytes).map_err(io)?;
    fs::rename(&tmp, &target).map_err(io)
}

/// Parses `config_text` and runs `pipeline`, writing artifacts.
pub fn run_pipeline(config_text: &str, pipeline: Pipeline, overrides: &Overrides) -> Result<RunReport, RunError> {
    let mut cfg = parse_config(config_text)?;
    if let Some(p) = cfg.pipeline {
        if p != pipeline {
            return Err(RunError::Config(ConfigError {
                location: crate::config::Location::Key("pipeline".into()),
                message: format!("config declares `{}` but `{}` was requested", p.name(), pipeline.name()),
            }));
        }
    }
    if let Some(s) = overrides.seed {
        cfg.seed = s;
    }
    if let Some(f) = overrides.format {
        cfg.format = f;
    }
    let out_dir = overrides
        .out
        .clone()
        .or_else(|| cfg.output_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("qsmp-out"));

    let mut a = Artifacts::new();
    a.line(format!("pipeline: {}", pipeline.name()));
    a.line(format!(
        "problem: {} (n = {}, d = {}, k = {})",
        cfg.family, cfg.spec.dims.n, cfg.spec.dims.d, cfg.spec.dims.k
    ));
    a.line(format!("grid: N = {}, T = {}", cfg.grid.steps, cfg.grid.horizon));
    a.line(format!("monte carlo: M = {}, seed = {}", cfg.paths, cfg.seed));
    match pipeline {
        Pipeline::Solve => solve(&cfg, &mut a)?,
        Pipeline::Adjoint => adjoint(&cfg, &mut a)?,
        Pipeline::GradientCheck => gradient(&cfg, &mut a)?,
        Pipeline::Descend => descend(&cfg, &mut a)?,
        Pipeline::MpCheck => mp_check(&cfg, &mut a)?,
        Pipeline::Bmo => bmo(&cfg, &mut a)?,
        Pipeline::Constants => constants(&cfg, &mut a)?,
    }
    match &a.status {
        CheckStatus::Pass => a.line("status: ok"),
        CheckStatus::NotPassed(why) => {
            let w = why.clone();
            a.line(format!("status: check not passed ({w})"))
        }
    }

    fs::create_dir_all(&out_dir).map_err(|source| RunError::Io { path: out_dir.clone(), source })?;
    let summary = std::mem::take(&mut a.summary);
    a.add("summary.txt", summary);
    let mut listing = Vec::new();
    for (name, bytes) in &a.files {
        write_atomic(&out_dir, name, bytes)?;
        listing.push(json!({ "file": name, "sha256": sha256_hex(bytes) }));
    }
    let manifest = json!({
        "tool": "qsmp",
        "version": env!("CARGO_PKG_VERSION"),
        "core_version": qsmp::VERSION,
        "pipeline": pipeline.name(),
        "config_sha256": sha256_hex(config_text.as_bytes()),
        "seed": cfg.seed,
        "format": match cfg.format { Format::Csv => "csv", Format::Json => "json" },
        "artifacts": listing,
    });
    write_atomic(&out_dir, "manifest.json", pretty(&manifest).as_bytes())?;
    let mut files: Vec<String> = a.files.iter().map(|(n, _)| n.clone()).collect();
    files.push("manifest.json".into());
    Ok(RunReport { pipeline, out_dir, files, status: a.status })
}

fn control_of(cfg: &ExperimentConfig) -> qsmp::paths::Control {
    cfg.control.to_control(&cfg.spec, &cfg.grid, cfg.lq.as_ref())
}

fn noise_of(cfg: &ExperimentConfig) -> Result<qsmp::paths::BrownianBatch, RunError> {
    Ok(simulate_brownian(&cfg.grid, cfg.spec.dims.d, cfg.paths, cfg.seed, 0)?)
}

fn mean_over_paths(m: usize, f: impl Fn(usize) -> f64) -> f64 {
    (0..m).map(f).sum::<f64>() / m as f64
}

/// `step,t,mean_x..,mean_u..,mean_y,std_y,mean_z..`.
fn path_statistics(grid: &TimeGrid, fwd: &ForwardBatch, bwd: &BackwardSolution) -> (String, Vec<Value>) {
    let (m, n, k, d) = (fwd.paths, fwd.n, fwd.k, bwd.d);
    let mut csv = String::from("step,t");
    for r in 1..=n {
        let _ = write!(csv, ",mean_x{r}");
    }
    for r in 1..=k {
        let _ = write!(csv, ",mean_u{r}");
    }
    csv.push_str(",mean_y,std_y");
    for j in 1..=d {
        let _ = write!(csv, ",mean_z{j}");
    }
    csv.push('\n');
    let mut rows = Vec::new();
    for i in 0..=grid.steps {
        let mx: Vec<f64> = (0..n).map(|r| mean_over_paths(m, |p| fwd.state(p, i)[r])).collect();
        let mu: Vec<f64> = (0..k).map(|r| mean_over_paths(m, |p| fwd.control(p, i)[r])).collect();
        let my = mean_over_paths(m, |p| bwd.y_at(p, i));
        let vy = (0..m).map(|p| (bwd.y_at(p, i) - my).powi(2)).sum::<f64>() / (m - 1).max(1) as f64;
        let mz: Vec<f64> = (0..d).map(|j| mean_over_paths(m, |p| bwd.z_at(p, i)[j])).collect();
        let _ = write!(csv, "{i},{:e}", grid.times[i]);
        for v in mx.iter().chain(&mu) {
            let _ = write!(csv, ",{v:e}");
        }
        let _ = write!(csv, ",{my:e},{:e}", vy.sqrt());
        for v in &mz {
            let _ = write!(csv, ",{v:e}");
        }
        csv.push('\n');
        rows.push(json!({ "step": i, "t": grid.times[i], "mean_x": mx, "mean_u": mu, "mean_y": my, "std_y": vy.sqrt(), "mean_z": mz }));
    }
    (csv, rows)
}

fn solve(cfg: &ExperimentConfig, a: &mut Artifacts) -> Result<(), RunError> {
    let noise = noise_of(cfg)?;
    let fwd = solve_forward_sde(&cfg.spec, &cfg.grid, &noise, &control_of(cfg))?;
    let bwd = solve_quadratic_bsde(&cfg.spec, &cfg.grid, &noise, &fwd, &cfg.solver)?;
    let bound = match derive_constants(&cfg.spec) {
        Ok(dc) => {
            let cond = Conditioning::new(fwd.state_view(), &bwd.basis)?;
            let b = estimate_apriori_bound(&bwd, &dc, &cfg.grid, cond)?;
            a.line(format!(
                "a-priori bound: sup|Y| + bmo2^2 = {:.6e} vs A = {:.6e} ({})",
                b.lhs,
                b.a,
                if b.pass { "holds" } else { "violated" }
            ));
            to_value(&b)
        }
        Err(e) => {
            a.line(format!("a-priori bound: not available ({e})"));
            Value::Null
        }
    };
    a.line(format!("Y0 = {:.10e} +- {:.3e}", bwd.y0.value, bwd.y0.std_error));
    a.line(format!("truncation radius = {:.6e}", bwd.truncation_radius));
    let (csv, rows) = path_statistics(&cfg.grid, &fwd, &bwd);
    let value = json!({
        "y0": bwd.y0,
        "truncation_radius": bwd.truncation_radius,
        "sup_abs_y": bwd.sup_abs_y(),
        "bound": bound,
        "steps": rows,
    });
    add_result(a, cfg.format, csv, &value);
    a.add("coefficients.csv", bwd.coefficients_csv());
    if cfg.save_paths {
        let mut buf = Vec::new();
        write_batch(&mut buf, &cfg.grid, cfg.spec.dims.d, &fwd, Some(&bwd))?;
        a.add("paths.bin", buf);
    }
    Ok(())
}

fn adjoint(cfg: &ExperimentConfig, a: &mut Artifacts) -> Result<(), RunError> {
    let noise = noise_of(cfg)?;
    let c = solve_candidate(&cfg.spec, &cfg.grid, &noise, &control_of(cfg), &cfg.solver)?;
    let (m, n, d, k) = (noise.paths, cfg.spec.dims.n, cfg.spec.dims.d, cfg.spec.dims.k);
    let mut csv = String::from("step,t");
    for r in 1..=n {
        let _ = write!(csv, ",mean_p{r}");
    }
    for r in 1..=n {
        for j in 1..=d {
            let _ = write!(csv, ",mean_q{r}_{j}");
        }
    }
    for l in 1..=k {
        let _ = write!(csv, ",mean_grad{l}");
    }
    csv.push_str(",mean_gamma\n");
    let mut rows = Vec::new();
    for i in 0..=cfg.grid.steps {
        let mp: Vec<f64> = (0..n).map(|r| mean_over_paths(m, |p| c.adjoint.p_at(p, i)[r])).collect();
        let mq: Vec<f64> = (0..n * d).map(|r| mean_over_paths(m, |p| c.adjoint.q_at(p, i)[r])).collect();
        let mg: Vec<f64> = if i < cfg.grid.steps {
            (0..k).map(|l| mean_over_paths(m, |p| c.gradient.at(p, i)[l])).collect()
        } else {
            vec![f64::NAN; k]
        };
        let mgam = mean_over_paths(m, |p| c.gamma.at(p, i));
        let _ = write!(csv, "{i},{:e}", cfg.grid.times[i]);
        for v in mp.iter().chain(&mq).chain(&mg) {
            let _ = write!(csv, ",{v:e}");
        }
        let _ = writeln!(csv, ",{mgam:e}");
        rows.push(json!({ "step": i, "t": cfg.grid.times[i], "mean_p": mp, "mean_q": mq, "mean_gradient": mg, "mean_gamma": mgam }));
    }
    let gamma_t = mean_over_paths(m, |p| c.gamma.at(p, cfg.grid.steps));
    a.line(format!("Y0 = {:.10e} +- {:.3e}", c.backward.y0.value, c.backward.y0.std_error));
    a.line(format!(
        "E[p_0] = {:?}",
        (0..n).map(|r| mean_over_paths(m, |p| c.adjoint.p_at(p, 0)[r])).collect::<Vec<_>>()
    ));
    a.line(format!("E[Gamma_T] = {gamma_t:.6e}"));
    add_result(a, cfg.format, csv, &json!({ "y0": c.backward.y0, "gamma_terminal_mean": gamma_t, "steps": rows }));
    Ok(())
}

fn verdict_text(v: Verdict) -> &'static str {
    match v {
        Verdict::Pass => "pass",
        Verdict::Fail => "fail",
        Verdict::Inconclusive => "inconclusive",
    }
}

fn gradient(cfg: &ExperimentConfig, a: &mut Artifacts) -> Result<(), RunError> {
    let noise = noise_of(cfg)?;
    let u = cfg.direction.to_control(&cfg.spec, &cfg.grid, cfg.lq.as_ref());
    let opts = GateauxOptions {
        bsde: cfg.solver.clone(),
        fit_degree: cfg.gradient_check.fit_degree,
        sigmas: cfg.tolerances.sigmas,
    };
    let r = gateaux_check(&cfg.spec, &cfg.grid, &noise, &control_of(cfg), &u, &cfg.gradient_check.epsilons, &opts)?;
    a.line(format!("J = {:.10e} +- {:.3e}", r.cost.value, r.cost.std_error));
    a.line(format!(
        "extrapolated quotient = {:.6e} +- {:.3e}",
        r.extrapolated_intercept.value, r.extrapolated_intercept.std_error
    ));
    a.line(format!("Yhat0 (auxiliary BSDE) = {:.6e} +- {:.3e}", r.yhat0.value, r.yhat0.std_error));
    a.line(format!("Yhat0 (Gamma representation) = {:.6e} +- {:.3e}", r.yhat0_gamma.value, r.yhat0_gamma.std_error));
    a.line(format!("representation check: {}", verdict_text(r.verdict)));
    a.line(format!("cross-method check: {}", verdict_text(r.cross_method_verdict)));
    for v in [r.verdict, r.cross_method_verdict] {
        if v != Verdict::Pass {
            a.fail(format!("gradient check {}", verdict_text(v)));
        }
    }
    add_result(a, cfg.format, r.to_csv(), &to_value(&r));
    Ok(())
}

fn descend(cfg: &ExperimentConfig, a: &mut Artifacts) -> Result<(), RunError> {
    let noise = noise_of(cfg)?;
    let (offset, gain) = &cfg.descent_init;
    let init = AffineFeedback::constant_in_time(cfg.grid.steps, offset, gain, Some(cfg.spec.domain.clone()));
    let r = projected_gradient_descent(&cfg.spec, &cfg.grid, &noise, init, &cfg.descent)?;
    let first = r.trace.first().map_or(f64::NAN, |t| t.cost);
    a.line(format!("iterations: {}", r.trace.len().saturating_sub(1)));
    a.line(format!("J: {first:.8e} -> {:.8e}", r.final_cost()));
    let oracle = cfg.lq.map(|p| families::riccati_cost(&p, cfg.spec.x0[0], cfg.spec.horizon));
    if let Some(o) = oracle {
        a.line(format!("Riccati optimum = {o:.8e} (relative gap {:.4e})", (r.final_cost() - o) / o.abs()));
    }
    if r.status == DescentStatus::Diverged {
        a.line("descent stopped: cost increased repeatedly");
        a.fail("descent diverged");
    }
    a.add("control.json", pretty(&to_value(&r.control)));
    add_result(a, cfg.format, r.trace_csv(), &json!({ "status": r.status, "trace": r.trace, "riccati_cost": oracle }));
    Ok(())
}

fn mp_check(cfg: &ExperimentConfig, a: &mut Artifacts) -> Result<(), RunError> {
    let noise = noise_of(cfg)?;
    let r = check_maximum_principle(&cfg.spec, &cfg.grid, &noise, &control_of(cfg), &cfg.mp_check)?;
    a.line(format!("samples: {}", r.samples));
    a.line(format!("min <H_u, v - u> = {:.6e} (tolerance there {:.3e})", r.min_inner_product, r.tolerance_at_min));
    a.line(format!("violations: {} ({:.4}%)", r.violations, 100.0 * r.violation_fraction));
    if r.violation_fraction > cfg.tolerances.mp_violation_fraction {
        a.fail(format!(
            "violation fraction {:.4} exceeds {}",
            r.violation_fraction, cfg.tolerances.mp_violation_fraction
        ));
    }
    let csv = format!(
        "samples,min_inner_product,tolerance_at_min,min_normalized,violations,violation_fraction,max_abs_gradient,mean_gradient_std_error\n{},{:e},{:e},{:e},{},{:e},{:e},{:e}\n",
        r.samples,
        r.min_inner_product,
        r.tolerance_at_min,
        r.min_normalized,
        r.violations,
        r.violation_fraction,
        r.max_abs_gradient,
        r.mean_gradient_std_error
    );
    add_result(a, cfg.format, csv, &to_value(&r));
    Ok(())
}

fn bmo(cfg: &ExperimentConfig, a: &mut Artifacts) -> Result<(), RunError> {
    let noise = noise_of(cfg)?;
    let fwd = solve_forward_sde(&cfg.spec, &cfg.grid, &noise, &control_of(cfg))?;
    let bwd = solve_quadratic_bsde(&cfg.spec, &cfg.grid, &noise, &fwd, &cfg.solver)?;
    let integrand = bwd.z_integrand();
    let d = cfg.spec.dims.d;
    let report = bmo_report(&integrand, &cfg.grid, d, fwd.state_view(), &bwd.basis, cfg.bmo.n_max)?;
    let rh = reverse_holder_check(&integrand, &noise, report.bmo2_estimate, cfg.bmo.reverse_holder_fraction)?;
    a.line(format!(
        "BMO2 estimate of Z.W = {:.6e} (99.9% quantile {:.6e})",
        report.bmo2_estimate, report.bmo2_quantile_999
    ));
    a.line(format!("critical exponent p_M = {:.6e}", report.p_m.p()));
    for c in &report.energy_checks {
        a.line(format!(
            "energy n = {}: {:.6e} <= {:.6e} ({})",
            c.n,
            c.lhs,
            c.rhs,
            if c.pass { "holds" } else { "violated" }
        ));
        if !c.pass {
            a.fail(format!("energy inequality violated at n = {}", c.n));
        }
    }
    a.line(format!(
        "reverse Hoelder at p = {:.6e}: moment {:.6e}, bound {} ({})",
        rh.p,
        rh.moment,
        rh.bound.map_or("n/a".to_string(), |b| format!("{b:.6e}")),
        if rh.pass { "holds" } else { "not verified" }
    ));
    if !rh.pass {
        a.fail(if rh.note.is_empty() { "reverse Hoelder bound violated".to_string() } else { rh.note.clone() });
    }
    add_result(
        a,
        cfg.format,
        qsmp::bmo::energy_csv(&report.energy_checks),
        &json!({ "report": to_value(&report), "reverse_holder": to_value(&rh) }),
    );
    Ok(())
}

fn constants(cfg: &ExperimentConfig, a: &mut Artifacts) -> Result<(), RunError> {
    let dc = derive_constants(&cfg.spec)?;
    let v = validate_assumptions(&cfg.spec, cfg.validation.samples, &cfg.validation.region)?;
    a.line(format!("alpha_tilde = {:.10e}", dc.alpha_tilde));
    a.line(format!("A = {:.10e}", dc.a));
    a.line(format!("p_bar - 1 = {:.6e}", dc.p_bar_minus_one));
    a.line(format!("4 p_bar* = {:.6e}", dc.admissibility_exponent));
    for c in &v.checks {
        a.line(format!(
            "{}: {} (worst ratio {:.3e})",
            c.name,
            if c.passed { "holds" } else { "violated" },
            c.worst_ratio
        ));
        if !c.passed {
            a.fail(format!("assumption check `{}` violated", c.name));
        }
    }
    let mut csv = String::from("name,value\n");
    for (name, val) in [
        ("alpha_tilde", dc.alpha_tilde),
        ("A", dc.a),
        ("p_bar", dc.p_bar),
        ("p_bar_minus_one", dc.p_bar_minus_one),
        ("p_bar_star", dc.p_bar_star),
        ("admissibility_exponent", dc.admissibility_exponent),
        ("psi_target", dc.psi_target),
    ] {
        let _ = writeln!(csv, "{name},{val:e}");
    }
    let mut checks = String::from("check,passed,worst_ratio\n");
    for c in &v.checks {
        let _ = writeln!(checks, "{},{},{:e}", csv_field(&c.name), c.passed, c.worst_ratio);
    }
    a.add("constants.json", pretty(&to_value(&dc)));
    a.add("validation.csv", checks);
    add_result(a, cfg.format, csv, &json!({ "derived": to_value(&dc), "validation": to_value(&v) }));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_quoting() {
        assert_eq!(csv_field("plain"), "plain");
        assert_eq!(csv_field("a,b"), "\"a,b\"");
        assert_eq!(csv_field("say \"hi\""), "\"say \"\"hi\"\"\"");
    }

    #[test]
    fn digest_is_hex() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }
}
