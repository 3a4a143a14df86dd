//! Multinomial logistic regression on soft (simplex-valued) targets.
//!
//! This is the `beta` half of the EM M-step: minimize
//! `-(1/n) sum_i sum_k W_ik log w_k(X_i; beta)` over the free rows of `beta`.
//! The objective is smooth and convex; the default solver takes Newton
//! directions with a backtracking (Armijo) line search, and plain gradient
//! descent is available for comparison.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric;

/// Row-major covariate matrix view (`rows x cols`, no intercept column).
#[derive(Debug, Clone, Copy)]
pub struct CovariateView<'a> {
    rows: usize,
    cols: usize,
    data: &'a [f64],
}

impl<'a> CovariateView<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(format!(
                "covariate buffer has {} entries, expected {rows}x{cols}",
                data.len()
            )));
        }
        Ok(CovariateView { rows, cols, data })
    }

    pub fn from_dataset(data: &'a crate::data::Dataset) -> Self {
        CovariateView {
            rows: data.n_rows(),
            cols: data.n_covariates(),
            data: data.covariates_flat(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &'a [f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// Per-row class weights, each row on the probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftTargetMatrix {
    rows: usize,
    classes: usize,
    values: Vec<f64>,
}

impl SoftTargetMatrix {
    pub fn new(values: Vec<f64>, rows: usize, classes: usize) -> Result<Self> {
        if classes == 0 || values.len() != rows * classes {
            return Err(Error::dim("soft target buffer does not match its shape"));
        }
        for (i, row) in values.chunks(classes).enumerate() {
            if row.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
                return Err(Error::domain(format!("soft target row {i} has a negative or non-finite entry")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-10 {
                return Err(Error::domain(format!("soft target row {i} sums to {s}, not 1")));
            }
        }
        Ok(SoftTargetMatrix { rows, classes, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let k = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::dim("ragged soft target rows"));
        }
        Self::new(rows.concat(), rows.len(), k)
    }

    /// Skips validation; used for posteriors that are normalized by construction.
    pub(crate) fn from_posteriors(values: Vec<f64>, rows: usize, classes: usize) -> Self {
        SoftTargetMatrix { rows, classes, values }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.classes..(i + 1) * self.classes]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DescentDirection {
    Newton,
    Gradient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatingConfig {
    /// Stop when the gradient infinity-norm is at most this.
    pub gradient_tolerance: f64,
    pub max_iterations: usize,
    /// Ridge penalty `(lambda/2) * ||free beta||^2`; zero disables it.
    pub ridge: f64,
    pub direction: DescentDirection,
}

impl Default for GatingConfig {
    fn default() -> Self {
        GatingConfig {
            gradient_tolerance: 1e-8,
            max_iterations: 500,
            ridge: 0.0,
            direction: DescentDirection::Newton,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GatingStatus {
    Converged,
    /// Iteration budget exhausted; the best iterate is returned.
    MaxIterations,
    /// No step along either direction decreased the objective.
    LineSearchStalled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatingFit {
    /// `K x (p+1)` coefficients, first row zero.
    pub beta: Vec<f64>,
    pub objective: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
    pub status: GatingStatus,
    /// Objective value after each accepted step, starting with the initial value.
    pub objective_trace: Vec<f64>,
}

struct Problem<'a> {
    x: CovariateView<'a>,
    w: &'a SoftTargetMatrix,
    row_weights: Option<&'a [f64]>,
    total_weight: f64,
    ridge: f64,
    k: usize,
    q: usize,
}

impl Problem<'_> {
    fn n_free(&self) -> usize {
        (self.k - 1) * self.q
    }

    #[inline]
    fn row_weight(&self, i: usize) -> f64 {
        self.row_weights.map_or(1.0, |c| c[i])
    }

    #[inline]
    fn log_gates(&self, beta: &[f64], xi: &[f64], eta: &mut [f64]) -> f64 {
        for (k, e) in eta.iter_mut().enumerate() {
            let row = &beta[k * self.q..(k + 1) * self.q];
            let mut v = row[0];
            for (b, x) in row[1..].iter().zip(xi) {
                v += b * x;
            }
            *e = v;
        }
        numeric::lse(eta)
    }

    fn objective(&self, beta: &[f64]) -> f64 {
        let mut eta = vec![0.0; self.k];
        let mut total = numeric::CompensatedSum::default();
        for i in 0..self.x.rows() {
            let norm = self.log_gates(beta, self.x.row(i), &mut eta);
            let wi = self.w.row(i);
            let mut s = 0.0;
            for k in 0..self.k {
                if wi[k] > 0.0 {
                    s -= wi[k] * (eta[k] - norm);
                }
            }
            total.add(self.row_weight(i) * s);
        }
        let mut f = total.value() / self.total_weight;
        if self.ridge > 0.0 {
            f += 0.5 * self.ridge * beta[self.q..].iter().map(|b| b * b).sum::<f64>();
        }
        f
    }

    /// Gradient (and optionally Hessian) with respect to the free coefficients.
    fn derivatives(&self, beta: &[f64], hessian: bool) -> (DVector<f64>, Option<DMatrix<f64>>) {
        let (k, q) = (self.k, self.q);
        let nf = self.n_free();
        let mut g = DVector::zeros(nf);
        let mut h = if hessian { Some(DMatrix::zeros(nf, nf)) } else { None };
        let mut eta = vec![0.0; k];
        let mut xt = vec![1.0; q];
        for i in 0..self.x.rows() {
            let xi = self.x.row(i);
            xt[1..].copy_from_slice(xi);
            let norm = self.log_gates(beta, xi, &mut eta);
            let wi = self.w.row(i);
            let s: f64 = wi.iter().sum();
            let c = self.row_weight(i);
            for e in eta.iter_mut() {
                *e = (*e - norm).exp();
            }
            for a in 1..k {
                let r = c * (s * eta[a] - wi[a]);
                let base = (a - 1) * q;
                for u in 0..q {
                    g[base + u] += r * xt[u];
                }
            }
            if let Some(h) = h.as_mut() {
                for a in 1..k {
                    for b in a..k {
                        let coef = c * s * eta[a] * (if a == b { 1.0 } else { 0.0 } - eta[b]);
                        let (ra, rb) = ((a - 1) * q, (b - 1) * q);
                        for u in 0..q {
                            let cu = coef * xt[u];
                            for v in 0..q {
                                h[(ra + u, rb + v)] += cu * xt[v];
                            }
                        }
                    }
                }
            }
        }
        g /= self.total_weight;
        if self.ridge > 0.0 {
            for (gi, b) in g.iter_mut().zip(&beta[q..]) {
                *gi += self.ridge * b;
            }
        }
        if let Some(h) = h.as_mut() {
            *h /= self.total_weight;
            // only the upper block triangle was accumulated
            for a in 0..nf {
                for b in 0..a {
                    h[(a, b)] = h[(b, a)];
                }
                h[(a, a)] += self.ridge;
            }
        }
        (g, h)
    }
}

fn inf_norm(g: &DVector<f64>) -> f64 {
    g.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// `-(1/n) sum_i sum_k W_ik log w_k(X_i; beta)`.
pub fn weighted_logistic_nll(beta: &[f64], x: CovariateView<'_>, w: &SoftTargetMatrix) -> Result<f64> {
    let problem = problem(beta, x, w, None, 0.0)?;
    Ok(problem.objective(beta))
}

/// Analytic gradient of [`weighted_logistic_nll`] with respect to the free
/// coefficients (rows `2..K` of `beta`, row-major).
pub fn weighted_logistic_gradient(beta: &[f64], x: CovariateView<'_>, w: &SoftTargetMatrix) -> Result<Vec<f64>> {
    let problem = problem(beta, x, w, None, 0.0)?;
    Ok(problem.derivatives(beta, false).0.iter().copied().collect())
}

fn problem<'a>(
    beta: &[f64],
    x: CovariateView<'a>,
    w: &'a SoftTargetMatrix,
    row_weights: Option<&'a [f64]>,
    ridge: f64,
) -> Result<Problem<'a>> {
    let k = w.classes();
    let q = x.cols() + 1;
    if w.rows() != x.rows() {
        return Err(Error::dim(format!("{} target rows for {} covariate rows", w.rows(), x.rows())));
    }
    if beta.len() != k * q {
        return Err(Error::dim(format!("beta has {} entries, expected {k}x{q}", beta.len())));
    }
    if beta[..q].iter().any(|&b| b != 0.0) {
        return Err(Error::domain("the reference row of beta must be zero"));
    }
    if x.rows() == 0 {
        return Err(Error::domain("no rows to fit"));
    }
    let total_weight = match row_weights {
        Some(c) => {
            if c.len() != x.rows() {
                return Err(Error::dim("row weight count differs from row count"));
            }
            c.iter().sum()
        }
        None => x.rows() as f64,
    };
    Ok(Problem {
        x,
        w,
        row_weights,
        total_weight,
        ridge,
        k,
        q,
    })
}

/// Fits the gating coefficients to soft targets starting from `init`.
pub fn fit_weighted_logistic(
    x: CovariateView<'_>,
    w: &SoftTargetMatrix,
    init: &[f64],
    config: &GatingConfig,
) -> Result<GatingFit> {
    fit_weighted_logistic_rows(x, w, None, init, config)
}

/// As [`fit_weighted_logistic`], with a nonnegative weight per row
/// (a row of weight `m` counts as `m` identical rows).
pub fn fit_weighted_logistic_rows(
    x: CovariateView<'_>,
    w: &SoftTargetMatrix,
    row_weights: Option<&[f64]>,
    init: &[f64],
    config: &GatingConfig,
) -> Result<GatingFit> {
    let problem = problem(init, x, w, row_weights, config.ridge)?;
    let mut beta = init.to_vec();
    let mut f = problem.objective(&beta);
    if !f.is_finite() {
        return Err(Error::Optimization(format!("non-finite objective {f} at the initial point")));
    }
    let mut trace = vec![f];
    if problem.k == 1 {
        return Ok(GatingFit {
            beta,
            objective: f,
            gradient_norm: 0.0,
            iterations: 0,
            status: GatingStatus::Converged,
            objective_trace: trace,
        });
    }
    let q = problem.q;
    let use_newton = config.direction == DescentDirection::Newton;
    let mut step_hint = 1.0_f64;
    let mut iterations = 0;
    let mut status = GatingStatus::MaxIterations;
    let mut gnorm;
    loop {
        let (g, h) = problem.derivatives(&beta, use_newton);
        gnorm = inf_norm(&g);
        if !gnorm.is_finite() {
            return Err(Error::Optimization("non-finite gradient".into()));
        }
        if gnorm <= config.gradient_tolerance {
            status = GatingStatus::Converged;
            break;
        }
        if iterations >= config.max_iterations {
            break;
        }
        let steepest = -&g;
        let mut directions: Vec<(DVector<f64>, f64)> = Vec::with_capacity(2);
        if let Some(h) = h {
            if let Some(chol) = h.cholesky() {
                directions.push((chol.solve(&steepest), 1.0));
            }
        }
        directions.push((steepest, step_hint));

        let mut accepted = false;
        for (dir, start) in directions {
            let slope = g.dot(&dir);
            if !(slope < 0.0) {
                continue;
            }
            let mut alpha = start;
            let mut trial = beta.clone();
            for _ in 0..60 {
                for (t, (b, d)) in trial[q..].iter_mut().zip(beta[q..].iter().zip(dir.iter())) {
                    *t = b + alpha * d;
                }
                let ft = problem.objective(&trial);
                if ft.is_finite() && ft <= f + 1e-4 * alpha * slope {
                    if start == step_hint && !use_newton {
                        step_hint = (alpha * 2.0).min(1e6);
                    }
                    beta = trial;
                    f = ft;
                    accepted = true;
                    break;
                }
                alpha *= 0.5;
            }
            if accepted {
                break;
            }
        }
        if !accepted {
            status = GatingStatus::LineSearchStalled;
            break;
        }
        iterations += 1;
        trace.push(f);
    }
    Ok(GatingFit {
        beta,
        objective: f,
        gradient_norm: gnorm,
        iterations,
        status,
        objective_trace: trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> (Vec<f64>, SoftTargetMatrix) {
        let x = vec![-1.0, 0.5, 2.0, -0.3, 0.0, 1.1];
        let w = SoftTargetMatrix::from_rows(&[
            vec![0.7, 0.2, 0.1],
            vec![0.1, 0.6, 0.3],
            vec![0.2, 0.2, 0.6],
            vec![0.5, 0.4, 0.1],
            vec![0.3, 0.3, 0.4],
            vec![0.1, 0.1, 0.8],
        ])
        .unwrap();
        (x, w)
    }

    #[test]
    fn zero_beta_gives_log_k() {
        let (x, w) = toy();
        let xv = CovariateView::new(&x, 6, 1).unwrap();
        let v = weighted_logistic_nll(&[0.0; 6], xv, &w).unwrap();
        assert!((v - 3f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn simplex_validation() {
        assert!(SoftTargetMatrix::from_rows(&[vec![0.5, 0.6]]).is_err());
        assert!(SoftTargetMatrix::from_rows(&[vec![-0.1, 1.1]]).is_err());
    }

    #[test]
    fn reference_row_enforced() {
        let (x, w) = toy();
        let xv = CovariateView::new(&x, 6, 1).unwrap();
        assert!(weighted_logistic_nll(&[0.1, 0.0, 0.0, 0.0, 0.0, 0.0], xv, &w).is_err());
        assert!(weighted_logistic_nll(&[0.0; 4], xv, &w).is_err());
    }

    #[test]
    fn both_directions_reach_same_optimum() {
        let (x, w) = toy();
        let xv = CovariateView::new(&x, 6, 1).unwrap();
        let newton = fit_weighted_logistic(xv, &w, &[0.0; 6], &GatingConfig::default()).unwrap();
        let gd_cfg = GatingConfig {
            direction: DescentDirection::Gradient,
            max_iterations: 20_000,
            gradient_tolerance: 1e-7,
            ..GatingConfig::default()
        };
        let gd = fit_weighted_logistic(xv, &w, &[0.0; 6], &gd_cfg).unwrap();
        assert_eq!(newton.status, GatingStatus::Converged);
        assert_eq!(gd.status, GatingStatus::Converged);
        assert!(newton.gradient_norm <= 1e-8);
        for (a, b) in newton.beta.iter().zip(&gd.beta) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
        for pair in gd.objective_trace.windows(2) {
            assert!(pair[1] <= pair[0]);
        }
    }

    #[test]
    fn separable_targets_drive_slope_up_unless_ridged() {
        let x = vec![-2.0, -1.0, 1.0, 2.0];
        let w = SoftTargetMatrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]]).unwrap();
        let xv = CovariateView::new(&x, 4, 1).unwrap();
        let fit = fit_weighted_logistic(xv, &w, &[0.0; 4], &GatingConfig::default()).unwrap();
        assert!(fit.objective < 1e-7);
        assert!(fit.beta[3] > 5.0);
        let ridge = GatingConfig {
            ridge: 0.1,
            ..GatingConfig::default()
        };
        let fit_r = fit_weighted_logistic(xv, &w, &[0.0; 4], &ridge).unwrap();
        assert_eq!(fit_r.status, GatingStatus::Converged);
        assert!(fit_r.beta[3] < fit.beta[3]);
    }

    #[test]
    fn row_weights_equal_duplication() {
        let (x, w) = toy();
        let xv = CovariateView::new(&x, 6, 1).unwrap();
        let weights = [1.0, 2.0, 1.0, 3.0, 1.0, 1.0];
        let weighted = fit_weighted_logistic_rows(xv, &w, Some(&weights), &[0.0; 6], &GatingConfig::default()).unwrap();
        let mut xd = Vec::new();
        let mut wd = Vec::new();
        for (i, &c) in weights.iter().enumerate() {
            for _ in 0..c as usize {
                xd.push(x[i]);
                wd.push(w.row(i).to_vec());
            }
        }
        let wd = SoftTargetMatrix::from_rows(&wd).unwrap();
        let xdv = CovariateView::new(&xd, wd.rows(), 1).unwrap();
        let dup = fit_weighted_logistic(xdv, &wd, &[0.0; 6], &GatingConfig::default()).unwrap();
        for (a, b) in weighted.beta.iter().zip(&dup.beta) {
            assert!((a - b).abs() < 1e-7);
        }
    }
}
