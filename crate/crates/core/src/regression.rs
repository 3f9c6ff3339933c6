//! Least-squares regression used as the empirical conditional expectation.
//!
//! Conditioning variables are standardized per fit, expanded into monomials,
//! and every non-constant column is centered and scaled. The intercept is
//! therefore decoupled from the rest of the system and equals the target
//! mean exactly, so fitted values preserve the sample mean.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rows per reduction chunk. Partial sums are combined in chunk order, which
/// keeps results independent of the number of worker threads.
pub(crate) const CHUNK: usize = 2048;

const CONSTANT_REL: f64 = 1e-12;
const COLUMN_ZERO: f64 = 1e-12;
const PIVOT_REL: f64 = 1e-13;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BasisKind {
    Polynomial,
    /// Constant only: the fitted value is the sample mean.
    None,
}

/// Feature map over a conditioning vector `(head, tail)`: all monomials of
/// total degree at most `degree` in the head variables, each multiplied by
/// `1` and by every tail variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionBasis {
    pub kind: BasisKind,
    pub degree: usize,
    pub head_dim: usize,
    pub tail_dim: usize,
    #[serde(skip)]
    exponents: Vec<Vec<u32>>,
}

impl RegressionBasis {
    pub fn polynomial(dim: usize, degree: usize) -> Self {
        Self { kind: BasisKind::Polynomial, degree, head_dim: dim, tail_dim: 0, exponents: monomials(dim, degree) }
    }

    pub fn constant(dim: usize) -> Self {
        Self { kind: BasisKind::None, degree: 0, head_dim: dim, tail_dim: 0, exponents: monomials(dim, 0) }
    }

    /// Extends the basis by products with `tail_dim` extra variables, which
    /// are appended after the head variables in every conditioning vector.
    pub fn with_affine_tail(mut self, tail_dim: usize) -> Self {
        self.tail_dim = tail_dim;
        self
    }

    pub fn state_dim(&self) -> usize {
        self.head_dim + self.tail_dim
    }

    pub fn feature_count(&self) -> usize {
        self.exponents().len() * (1 + self.tail_dim)
    }

    fn exponents(&self) -> &[Vec<u32>] {
        &self.exponents
    }

    /// Rebuilds the monomial table after deserialization.
    pub fn rebuilt(&self) -> Self {
        let mut out = self.clone();
        out.exponents = match self.kind {
            BasisKind::Polynomial => monomials(self.head_dim, self.degree),
            BasisKind::None => monomials(self.head_dim, 0),
        };
        out
    }

    /// Writes the raw features of an (already standardized) conditioning
    /// vector. Feature 0 is the constant.
    pub fn features(&self, state: &[f64], out: &mut [f64]) {
        let (head, tail) = state.split_at(self.head_dim);
        let exps = self.exponents();
        let block = exps.len();
        for (slot, e) in out[..block].iter_mut().zip(exps) {
            let mut v = 1.0;
            for (x, p) in head.iter().zip(e) {
                if *p > 0 {
                    v *= x.powi(*p as i32);
                }
            }
            *slot = v;
        }
        for (j, tv) in tail.iter().enumerate() {
            for f in 0..block {
                out[(j + 1) * block + f] = out[f] * tv;
            }
        }
    }
}

/// Exponent vectors of all monomials in `dim` variables with total degree at
/// most `degree`, graded by degree; the first entry is the constant.
fn monomials(dim: usize, degree: usize) -> Vec<Vec<u32>> {
    let mut out = vec![vec![0u32; dim]];
    for total in 1..=degree {
        let mut cur = vec![0u32; dim];
        push_compositions(&mut out, &mut cur, 0, total as u32);
    }
    out
}

fn push_compositions(out: &mut Vec<Vec<u32>>, cur: &mut Vec<u32>, pos: usize, left: u32) {
    if pos + 1 == cur.len() {
        cur[pos] = left;
        out.push(cur.clone());
        cur[pos] = 0;
        return;
    }
    if cur.is_empty() {
        return;
    }
    for take in (0..=left).rev() {
        cur[pos] = take;
        push_compositions(out, cur, pos + 1, left - take);
    }
    cur[pos] = 0;
}

/// Chunked deterministic column sums of a row-major `rows x cols` matrix.
fn column_sums(data: &[f64], cols: usize) -> Vec<f64> {
    let partials: Vec<Vec<f64>> = data
        .par_chunks(CHUNK * cols)
        .map(|chunk| {
            let mut s = vec![0.0; cols];
            for row in chunk.chunks_exact(cols) {
                for (a, v) in s.iter_mut().zip(row) {
                    *a += v;
                }
            }
            s
        })
        .collect();
    let mut total = vec![0.0; cols];
    for p in partials {
        for (a, v) in total.iter_mut().zip(p) {
            *a += v;
        }
    }
    total
}

/// Chunked deterministic column sums of squared deviations.
fn column_sq_dev(data: &[f64], cols: usize, mean: &[f64]) -> Vec<f64> {
    let partials: Vec<Vec<f64>> = data
        .par_chunks(CHUNK * cols)
        .map(|chunk| {
            let mut s = vec![0.0; cols];
            for row in chunk.chunks_exact(cols) {
                for ((a, v), m) in s.iter_mut().zip(row).zip(mean) {
                    *a += (v - m) * (v - m);
                }
            }
            s
        })
        .collect();
    let mut total = vec![0.0; cols];
    for p in partials {
        for (a, v) in total.iter_mut().zip(p) {
            *a += v;
        }
    }
    total
}

/// Deterministic chunked sum of a slice.
pub(crate) fn det_sum(values: &[f64]) -> f64 {
    let partials: Vec<f64> = values.par_chunks(CHUNK).map(|c| c.iter().sum::<f64>()).collect();
    partials.into_iter().sum()
}

/// Upper triangle (row-major, full storage) of `X^T X`.
fn gram(data: &[f64], cols: usize) -> Vec<f64> {
    let partials: Vec<Vec<f64>> = data
        .par_chunks(CHUNK * cols)
        .map(|chunk| {
            let mut g = vec![0.0; cols * cols];
            for row in chunk.chunks_exact(cols) {
                for a in 0..cols {
                    let ra = row[a];
                    let ga = &mut g[a * cols..(a + 1) * cols];
                    for b in a..cols {
                        ga[b] += ra * row[b];
                    }
                }
            }
            g
        })
        .collect();
    let mut total = vec![0.0; cols * cols];
    for p in partials {
        for (a, v) in total.iter_mut().zip(p) {
            *a += v;
        }
    }
    for a in 0..cols {
        for b in 0..a {
            total[a * cols + b] = total[b * cols + a];
        }
    }
    total
}

/// `X^T y` for one target, chunked.
fn cross(data: &[f64], cols: usize, target: &[f64], shift: f64) -> Vec<f64> {
    let partials: Vec<Vec<f64>> = data
        .par_chunks(CHUNK * cols)
        .zip(target.par_chunks(CHUNK))
        .map(|(chunk, t)| {
            let mut s = vec![0.0; cols];
            for (row, y) in chunk.chunks_exact(cols).zip(t) {
                let yc = y - shift;
                for (a, v) in s.iter_mut().zip(row) {
                    *a += v * yc;
                }
            }
            s
        })
        .collect();
    let mut total = vec![0.0; cols];
    for p in partials {
        for (a, v) in total.iter_mut().zip(p) {
            *a += v;
        }
    }
    total
}

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
#[derive(Debug, Clone)]
struct Cholesky {
    dim: usize,
    l: Vec<f64>,
}

impl Cholesky {
    fn factor(a: &[f64], dim: usize) -> Result<Self> {
        let mut l = vec![0.0; dim * dim];
        let scale = (0..dim).map(|i| a[i * dim + i]).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
        for j in 0..dim {
            let mut diag = a[j * dim + j];
            for k in 0..j {
                diag -= l[j * dim + k] * l[j * dim + k];
            }
            if !(diag > PIVOT_REL * scale) {
                return Err(Error::IllConditioned(format!("pivot {j} is {diag:e} against diagonal scale {scale:e}")));
            }
            let ljj = diag.sqrt();
            l[j * dim + j] = ljj;
            for i in j + 1..dim {
                let mut s = a[i * dim + j];
                for k in 0..j {
                    s -= l[i * dim + k] * l[j * dim + k];
                }
                l[i * dim + j] = s / ljj;
            }
        }
        Ok(Self { dim, l })
    }

    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim;
        let mut y = b.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for k in 0..i {
                s -= self.l[i * n + k] * y[k];
            }
            y[i] = s / self.l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..n {
                s -= self.l[k * n + i] * y[k];
            }
            y[i] = s / self.l[i * n + i];
        }
        y
    }
}

/// A fitted per-step regression: the standardization used at fit time plus
/// one coefficient vector per right-hand side. Can be evaluated at any
/// conditioning vector, not only the sample it was fitted on.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepFit {
    pub basis: RegressionBasis,
    pub var_mean: Vec<f64>,
    /// Zero marks a variable that was constant across the sample.
    pub var_scale: Vec<f64>,
    /// Raw feature indices that survived (feature 0 is the intercept and is
    /// never listed).
    pub active: Vec<usize>,
    pub col_mean: Vec<f64>,
    pub col_scale: Vec<f64>,
    /// Per right-hand side: `[intercept, beta_1, .., beta_active]`.
    pub coefficients: Vec<Vec<f64>>,
}

impl StepFit {
    pub fn outputs(&self) -> usize {
        self.coefficients.len()
    }

    /// Evaluates right-hand side `rhs` at a raw conditioning vector.
    pub fn eval(&self, rhs: usize, state: &[f64]) -> f64 {
        let mut std = vec![0.0; state.len()];
        let mut feats = vec![0.0; self.basis.feature_count()];
        self.eval_into(state, &mut std, &mut feats, &[rhs])[0]
    }

    fn eval_into(&self, state: &[f64], std: &mut [f64], feats: &mut [f64], rhs: &[usize]) -> Vec<f64> {
        standardize(state, &self.var_mean, &self.var_scale, std);
        self.basis.features(std, feats);
        rhs.iter()
            .map(|&r| {
                let c = &self.coefficients[r];
                let mut v = c[0];
                for (j, &f) in self.active.iter().enumerate() {
                    v += c[j + 1] * (feats[f] - self.col_mean[j]) / self.col_scale[j];
                }
                v
            })
            .collect()
    }
}

fn standardize(state: &[f64], mean: &[f64], scale: &[f64], out: &mut [f64]) {
    for i in 0..state.len() {
        out[i] = if scale[i] > 0.0 { (state[i] - mean[i]) / scale[i] } else { 0.0 };
    }
}

/// Centered and scaled design matrix for one regression step.
pub struct Design {
    basis: RegressionBasis,
    rows: usize,
    var_mean: Vec<f64>,
    var_scale: Vec<f64>,
    active: Vec<usize>,
    col_mean: Vec<f64>,
    col_scale: Vec<f64>,
    /// Row-major `rows x active.len()`.
    x: Vec<f64>,
    gram: Vec<f64>,
}

impl Design {
    /// `states` holds `rows` conditioning vectors of length `basis.state_dim()`,
    /// row-major.
    pub fn build(basis: &RegressionBasis, states: &[f64], rows: usize) -> Result<Self> {
        let sd = basis.state_dim();
        if states.len() != rows * sd {
            return Err(Error::Dimension(format!(
                "regression states hold {} values, expected {rows} x {sd}",
                states.len()
            )));
        }
        if rows == 0 {
            return Err(Error::Dimension("regression needs at least one sample".into()));
        }
        let m = rows as f64;
        let var_mean: Vec<f64> = column_sums(states, sd).into_iter().map(|s| s / m).collect();
        let var_var = column_sq_dev(states, sd, &var_mean);
        let var_scale: Vec<f64> = var_var
            .iter()
            .zip(&var_mean)
            .map(|(v, mu)| {
                let s = (v / m).sqrt();
                if s <= CONSTANT_REL * (1.0 + mu.abs()) {
                    0.0
                } else {
                    s
                }
            })
            .collect();

        let fc = basis.feature_count();
        let mut raw = vec![0.0; rows * fc];
        raw.par_chunks_mut(CHUNK * fc).zip(states.par_chunks(CHUNK * sd)).for_each(|(out, st)| {
            let mut z = vec![0.0; sd];
            for (o, s) in out.chunks_exact_mut(fc).zip(st.chunks_exact(sd)) {
                standardize(s, &var_mean, &var_scale, &mut z);
                basis.features(&z, o);
            }
        });
        let col_mean_all: Vec<f64> = column_sums(&raw, fc).into_iter().map(|s| s / m).collect();
        let col_var_all = column_sq_dev(&raw, fc, &col_mean_all);
        let mut active = Vec::new();
        let mut col_mean = Vec::new();
        let mut col_scale = Vec::new();
        for f in 1..fc {
            let s = (col_var_all[f] / m).sqrt();
            if s > COLUMN_ZERO {
                active.push(f);
                col_mean.push(col_mean_all[f]);
                col_scale.push(s);
            }
        }
        let a = active.len();
        let mut x = vec![0.0; rows * a];
        if a > 0 {
            x.par_chunks_mut(CHUNK * a).zip(raw.par_chunks(CHUNK * fc)).for_each(|(out, r)| {
                for (o, rr) in out.chunks_exact_mut(a).zip(r.chunks_exact(fc)) {
                    for j in 0..a {
                        o[j] = (rr[active[j]] - col_mean[j]) / col_scale[j];
                    }
                }
            });
        }
        drop(raw);
        let gram = if a > 0 { gram(&x, a) } else { Vec::new() };
        Ok(Self { basis: basis.clone(), rows, var_mean, var_scale, active, col_mean, col_scale, x, gram })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Number of regressors including the intercept.
    pub fn width(&self) -> usize {
        self.active.len() + 1
    }

    /// Factorizes `X^T X + ridge I` (ridge on non-intercept columns only).
    pub fn factor(&self, ridge: f64) -> Result<Factor<'_>> {
        if !(ridge >= 0.0 && ridge.is_finite()) {
            return Err(Error::IllConditioned(format!("ridge must be finite and >= 0, got {ridge}")));
        }
        let a = self.active.len();
        if a + 1 > self.rows && ridge == 0.0 {
            return Err(Error::IllConditioned(format!(
                "{} regressors for {} samples without regularization",
                a + 1,
                self.rows
            )));
        }
        let chol = if a > 0 {
            let mut g = self.gram.clone();
            for j in 0..a {
                g[j * a + j] += ridge;
            }
            Some(Cholesky::factor(&g, a)?)
        } else {
            None
        };
        Ok(Factor { design: self, chol })
    }
}

pub struct Factor<'a> {
    design: &'a Design,
    chol: Option<Cholesky>,
}

impl Factor<'_> {
    /// Solves for every target; returns the fit and the fitted values per
    /// target.
    pub fn solve(&self, targets: &[&[f64]]) -> Result<(StepFit, Vec<Vec<f64>>)> {
        let d = self.design;
        let a = d.active.len();
        let mut coefficients = Vec::with_capacity(targets.len());
        let mut fitted = Vec::with_capacity(targets.len());
        for t in targets {
            if t.len() != d.rows {
                return Err(Error::Dimension(format!("target has {} values for {} samples", t.len(), d.rows)));
            }
            let mean = det_sum(t) / d.rows as f64;
            let mut c = vec![mean];
            if let Some(ch) = &self.chol {
                let rhs = cross(&d.x, a, t, mean);
                c.extend(ch.solve(&rhs));
            }
            let mut fv = vec![mean; d.rows];
            if a > 0 {
                let beta = &c[1..];
                fv.par_chunks_mut(CHUNK).zip(d.x.par_chunks(CHUNK * a)).for_each(|(out, xr)| {
                    for (o, row) in out.iter_mut().zip(xr.chunks_exact(a)) {
                        let mut v = 0.0;
                        for (b, x) in beta.iter().zip(row) {
                            v += b * x;
                        }
                        *o += v;
                    }
                });
            }
            coefficients.push(c);
            fitted.push(fv);
        }
        let fit = StepFit {
            basis: d.basis.clone(),
            var_mean: d.var_mean.clone(),
            var_scale: d.var_scale.clone(),
            active: d.active.clone(),
            col_mean: d.col_mean.clone(),
            col_scale: d.col_scale.clone(),
            coefficients,
        };
        Ok((fit, fitted))
    }
}

/// Conditioning vectors for every path and grid time, `M x (N+1) x dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionStates {
    pub paths: usize,
    pub steps: usize,
    pub dim: usize,
    pub values: Vec<f64>,
}

impl RegressionStates {
    pub fn new(paths: usize, steps: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != paths * (steps + 1) * dim {
            return Err(Error::Dimension(format!(
                "conditioning array holds {} values, expected {paths} x {} x {dim}",
                values.len(),
                steps + 1
            )));
        }
        Ok(Self { paths, steps, dim, values })
    }

    /// Side-by-side concatenation `(a, b)` of two path-major arrays.
    pub fn concat(paths: usize, steps: usize, a: &[f64], da: usize, b: &[f64], db: usize) -> Result<Self> {
        let w = steps + 1;
        if a.len() != paths * w * da || b.len() != paths * w * db {
            return Err(Error::Dimension("conditioning blocks have mismatched shapes".into()));
        }
        let dim = da + db;
        let mut values = vec![0.0; paths * w * dim];
        values.par_chunks_mut(w * dim).enumerate().for_each(|(p, row)| {
            for i in 0..w {
                let o = i * dim;
                row[o..o + da].copy_from_slice(&a[(p * w + i) * da..(p * w + i + 1) * da]);
                row[o + da..o + dim].copy_from_slice(&b[(p * w + i) * db..(p * w + i + 1) * db]);
            }
        });
        Ok(Self { paths, steps, dim, values })
    }

    pub fn at(&self, path: usize, step: usize) -> &[f64] {
        let o = (path * (self.steps + 1) + step) * self.dim;
        &self.values[o..o + self.dim]
    }

    /// Row-major `M x dim` snapshot at one grid time.
    pub fn at_step(&self, step: usize) -> Vec<f64> {
        self.view().at_step(step)
    }

    pub fn subset(&self, range: std::ops::Range<usize>) -> Self {
        let w = (self.steps + 1) * self.dim;
        Self {
            paths: range.len(),
            steps: self.steps,
            dim: self.dim,
            values: self.values[range.start * w..range.end * w].to_vec(),
        }
    }
}

/// Borrowed conditioning array, `M x (N+1) x dim`, path-major.
#[derive(Debug, Clone, Copy)]
pub struct StateView<'a> {
    pub paths: usize,
    pub steps: usize,
    pub dim: usize,
    pub values: &'a [f64],
}

impl<'a> StateView<'a> {
    pub fn new(paths: usize, steps: usize, dim: usize, values: &'a [f64]) -> Result<Self> {
        if values.len() != paths * (steps + 1) * dim {
            return Err(Error::Dimension(format!(
                "conditioning array holds {} values, expected {paths} x {} x {dim}",
                values.len(),
                steps + 1
            )));
        }
        Ok(Self { paths, steps, dim, values })
    }

    pub fn at(&self, path: usize, step: usize) -> &'a [f64] {
        let o = (path * (self.steps + 1) + step) * self.dim;
        &self.values[o..o + self.dim]
    }

    /// Row-major `M x dim` snapshot at one grid time.
    pub fn at_step(&self, step: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.paths * self.dim];
        out.par_chunks_mut(self.dim).enumerate().for_each(|(p, o)| o.copy_from_slice(self.at(p, step)));
        out
    }
}

impl RegressionStates {
    pub fn view(&self) -> StateView<'_> {
        StateView { paths: self.paths, steps: self.steps, dim: self.dim, values: &self.values }
    }
}

/// Default ridge parameter for `rows` samples.
pub fn default_ridge(rows: usize) -> f64 {
    1e-8 * rows as f64
}

/// Result of a raw least-squares fit on user-provided features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionFit {
    /// One coefficient per input feature column.
    pub coefficients: Vec<f64>,
    pub fitted: Vec<f64>,
}

/// Ridge least squares of `targets` on the columns of `features`
/// (row-major, `rows x cols`). A constant column, if present, is treated as
/// an unpenalized intercept; every other column is penalized by `ridge`
/// after centering and scaling to unit variance.
pub fn regress_conditional_expectation(
    features: &[f64],
    cols: usize,
    targets: &[f64],
    ridge: f64,
) -> Result<RegressionFit> {
    if cols == 0 || features.len() % cols != 0 {
        return Err(Error::Dimension("feature matrix is not rows x cols".into()));
    }
    let rows = features.len() / cols;
    if targets.len() != rows {
        return Err(Error::Dimension(format!("{} targets for {rows} rows", targets.len())));
    }
    if rows <= cols && ridge == 0.0 {
        return Err(Error::IllConditioned(format!("{rows} samples for {cols} features")));
    }
    let m = rows as f64;
    let mean: Vec<f64> = column_sums(features, cols).into_iter().map(|s| s / m).collect();
    let var = column_sq_dev(features, cols, &mean);
    let sd: Vec<f64> = var.iter().map(|v| (v / m).sqrt()).collect();
    let constant: Vec<bool> = sd.iter().zip(&mean).map(|(s, mu)| *s <= CONSTANT_REL * (1.0 + mu.abs())).collect();
    let intercept_col = (0..cols).find(|&j| constant[j] && mean[j] != 0.0);
    let varying: Vec<usize> = (0..cols).filter(|&j| !constant[j]).collect();
    let a = varying.len();

    // With an intercept, columns are centered; without, only scaled (by RMS).
    let center = intercept_col.is_some();
    let shift: Vec<f64> = varying.iter().map(|&j| if center { mean[j] } else { 0.0 }).collect();
    let scale: Vec<f64> = varying
        .iter()
        .zip(&shift)
        .map(|(&j, s)| if center { sd[j] } else { (var[j] / m + (mean[j] - s).powi(2)).sqrt() })
        .collect();
    let mut x = vec![0.0; rows * a];
    for (r, row) in features.chunks_exact(cols).enumerate() {
        for (i, &j) in varying.iter().enumerate() {
            x[r * a + i] = (row[j] - shift[i]) / scale[i];
        }
    }
    let tmean = if center { det_sum(targets) / m } else { 0.0 };
    let beta = if a > 0 {
        let mut g = gram(&x, a);
        for j in 0..a {
            g[j * a + j] += ridge;
        }
        let ch = Cholesky::factor(&g, a)?;
        ch.solve(&cross(&x, a, targets, tmean))
    } else {
        Vec::new()
    };
    let mut coefficients = vec![0.0; cols];
    let mut intercept = tmean;
    for (i, &j) in varying.iter().enumerate() {
        coefficients[j] = beta[i] / scale[i];
        intercept -= beta[i] * shift[i] / scale[i];
    }
    if let Some(c) = intercept_col {
        coefficients[c] = intercept / mean[c];
    }
    let mut fitted = vec![tmean; rows];
    for (r, f) in fitted.iter_mut().enumerate() {
        for i in 0..a {
            *f += beta[i] * x[r * a + i];
        }
    }
    Ok(RegressionFit { coefficients, fitted })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn monomial_count_matches_binomial() {
        for (dim, deg, count) in [(1, 0, 1), (1, 4, 5), (2, 2, 6), (2, 3, 10), (3, 2, 10)] {
            let b = RegressionBasis::polynomial(dim, deg);
            assert_eq!(b.feature_count(), count, "dim {dim} degree {deg}");
        }
        assert_eq!(RegressionBasis::polynomial(1, 2).with_affine_tail(1).feature_count(), 6);
        assert_eq!(RegressionBasis::constant(3).feature_count(), 1);
    }

    #[test]
    fn features_start_with_constant() {
        let b = RegressionBasis::polynomial(2, 2).with_affine_tail(1);
        let mut out = vec![0.0; b.feature_count()];
        b.features(&[2.0, 3.0, 5.0], &mut out);
        assert_eq!(out[0], 1.0);
        assert_eq!(out[6], 5.0);
        let mut sorted: Vec<f64> = out[..6].to_vec();
        sorted.sort_by(f64::total_cmp);
        assert_eq!(sorted, vec![1.0, 2.0, 3.0, 4.0, 6.0, 9.0]);
    }

    #[test]
    fn constant_targets_are_fitted_exactly() {
        let b = RegressionBasis::polynomial(1, 3);
        let states: Vec<f64> = (0..500).map(|i| (i as f64 * 0.37).sin()).collect();
        let design = Design::build(&b, &states, 500).unwrap();
        let targets = vec![2.5; 500];
        let (_, fv) = design.factor(default_ridge(500)).unwrap().solve(&[&targets]).unwrap();
        for v in &fv[0] {
            assert!((v - 2.5).abs() < 1e-13);
        }
    }

    #[test]
    fn polynomial_targets_are_recovered() {
        let b = RegressionBasis::polynomial(2, 2);
        let mut states = Vec::new();
        let mut targets = Vec::new();
        for i in 0..400 {
            let x = (i as f64 * 0.713).sin() * 3.0;
            let y = (i as f64 * 1.37).cos() - 0.5;
            states.extend([x, y]);
            targets.push(1.0 - 2.0 * x + 0.5 * y + 0.25 * x * y - y * y);
        }
        let design = Design::build(&b, &states, 400).unwrap();
        let (fit, fv) = design.factor(0.0).unwrap().solve(&[&targets]).unwrap();
        for (f, t) in fv[0].iter().zip(&targets) {
            assert!((f - t).abs() < 1e-10);
        }
        // out-of-sample evaluation through the stored transform
        let v = fit.eval(0, &[0.3, 0.2]);
        let exact = 1.0 - 0.6 + 0.1 + 0.25 * 0.06 - 0.04;
        assert!((v - exact).abs() < 1e-10);
    }

    #[test]
    fn mean_is_preserved() {
        let b = RegressionBasis::polynomial(1, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let states: Vec<f64> = (0..1000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let targets: Vec<f64> = states.iter().map(|x: &f64| (2.0 * x).sin() + x.abs()).collect();
        let design = Design::build(&b, &states, 1000).unwrap();
        let (_, fv) = design.factor(default_ridge(1000)).unwrap().solve(&[&targets]).unwrap();
        let m1: f64 = targets.iter().sum::<f64>() / 1000.0;
        let m2: f64 = fv[0].iter().sum::<f64>() / 1000.0;
        assert!((m1 - m2).abs() < 1e-13);
    }

    #[test]
    fn constant_conditioning_reduces_to_mean() {
        let b = RegressionBasis::polynomial(2, 3);
        let states: Vec<f64> = (0..100).flat_map(|_| [1.0, -2.0]).collect();
        let targets: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let design = Design::build(&b, &states, 100).unwrap();
        assert_eq!(design.width(), 1);
        let (_, fv) = design.factor(0.0).unwrap().solve(&[&targets]).unwrap();
        assert!(fv[0].iter().all(|v| (*v - 49.5).abs() < 1e-12));
    }

    #[test]
    fn collinear_columns_without_ridge_are_rejected() {
        let features: Vec<f64> = (0..50).flat_map(|i| [1.0, i as f64, 2.0 * i as f64]).collect();
        let targets: Vec<f64> = (0..50).map(|i| i as f64).collect();
        assert!(matches!(regress_conditional_expectation(&features, 3, &targets, 0.0), Err(Error::IllConditioned(_))));
        assert!(regress_conditional_expectation(&features, 3, &targets, 1e-6).is_ok());
    }

    #[test]
    fn raw_regression_recovers_linear_model() {
        let features: Vec<f64> = (0..60)
            .flat_map(|i| {
                let x = i as f64 * 0.1;
                [1.0, x, (x * 1.3).sin()]
            })
            .collect();
        let targets: Vec<f64> = features.chunks(3).map(|r| 0.5 + 2.0 * r[1] - 3.0 * r[2]).collect();
        let fit = regress_conditional_expectation(&features, 3, &targets, 0.0).unwrap();
        assert!((fit.coefficients[0] - 0.5).abs() < 1e-10);
        assert!((fit.coefficients[1] - 2.0).abs() < 1e-10);
        assert!((fit.coefficients[2] + 3.0).abs() < 1e-10);
        for (f, t) in fit.fitted.iter().zip(&targets) {
            assert!((f - t).abs() < 1e-10);
        }
    }

    #[test]
    fn raw_regression_matches_nalgebra_least_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let rows = 200;
        let mut features = Vec::new();
        let mut targets = Vec::new();
        for _ in 0..rows {
            let a: f64 = StandardNormal.sample(&mut rng);
            let b: f64 = StandardNormal.sample(&mut rng);
            let e: f64 = StandardNormal.sample(&mut rng);
            features.extend([1.0, a, b * a]);
            targets.push(a - 0.2 * b + e);
        }
        let fit = regress_conditional_expectation(&features, 3, &targets, 0.0).unwrap();
        let x = nalgebra::DMatrix::from_row_slice(rows, 3, &features);
        let y = nalgebra::DVector::from_vec(targets);
        let beta = x.clone().svd(true, true).solve(&y, 1e-14).unwrap();
        for j in 0..3 {
            assert!((fit.coefficients[j] - beta[j]).abs() < 1e-10, "{j}");
        }
    }
}
