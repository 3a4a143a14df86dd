//! The mixture of binomial-product experts: parameters, densities and likelihoods.
//!
//! For covariates `x` and a bounded outcome vector `y`,
//!
//! ```text
//! p(y | x) = sum_k w_k(x) * prod_j Binomial(y_j; N_j, theta_kj)
//! w_k(x)   = exp(beta_k . (1, x)) / sum_k' exp(beta_k' . (1, x)),   beta_1 = 0
//! ```
//!
//! Everything is evaluated in log space.

use crate::data::{Dataset, MissingPattern, OutcomeSpec};
use crate::error::{Error, Result};
use crate::numeric::{self, CompensatedSum};

/// Lower clamp for success probabilities.
pub const THETA_MIN: f64 = 1e-6;
/// Upper clamp for success probabilities.
pub const THETA_MAX: f64 = 1.0 - 1e-6;

#[inline]
pub fn clamp_theta(t: f64) -> f64 {
    t.clamp(THETA_MIN, THETA_MAX)
}

/// Number of free parameters: `K(p + d + 1) - p - 1`.
pub fn param_count(k: usize, p: usize, d: usize) -> usize {
    k * (p + d + 1) - p - 1
}

/// Gating coefficients `beta` (`K x (p+1)`, first column intercepts, first row
/// pinned to zero) and success probabilities `theta` (`K x d`).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    n_components: usize,
    n_covariates: usize,
    n_outcomes: usize,
    beta: Vec<f64>,
    theta: Vec<f64>,
}

impl ModelParams {
    /// Builds parameters from row-major buffers. `theta` entries outside
    /// `[0, 1]` are rejected, entries inside are clamped to `[THETA_MIN, THETA_MAX]`.
    pub fn new(
        n_components: usize,
        n_covariates: usize,
        n_outcomes: usize,
        beta: Vec<f64>,
        theta: Vec<f64>,
    ) -> Result<Self> {
        let q = n_covariates + 1;
        if n_components == 0 || n_outcomes == 0 {
            return Err(Error::domain("need at least one component and one outcome"));
        }
        if beta.len() != n_components * q {
            return Err(Error::dim(format!(
                "beta has {} entries, expected {}x{}",
                beta.len(),
                n_components,
                q
            )));
        }
        if theta.len() != n_components * n_outcomes {
            return Err(Error::dim(format!(
                "theta has {} entries, expected {}x{}",
                theta.len(),
                n_components,
                n_outcomes
            )));
        }
        if beta[..q].iter().any(|&b| b != 0.0) {
            return Err(Error::domain("the first (reference) row of beta must be zero"));
        }
        if beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::domain("beta must be finite"));
        }
        if theta.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::domain("theta entries must lie in [0, 1]"));
        }
        let theta = theta.into_iter().map(clamp_theta).collect();
        Ok(ModelParams {
            n_components,
            n_covariates,
            n_outcomes,
            beta,
            theta,
        })
    }

    /// Builds parameters from nested rows (`beta` rows have length `p + 1`).
    pub fn from_rows(beta: &[Vec<f64>], theta: &[Vec<f64>]) -> Result<Self> {
        let k = theta.len();
        if beta.len() != k {
            return Err(Error::dim("beta and theta have different component counts"));
        }
        let q = beta.first().map_or(1, Vec::len);
        let d = theta.first().map_or(0, Vec::len);
        if q == 0 || beta.iter().any(|r| r.len() != q) || theta.iter().any(|r| r.len() != d) {
            return Err(Error::dim("ragged parameter rows"));
        }
        Self::new(k, q - 1, d, beta.concat(), theta.concat())
    }

    /// Reassembles parameters from the free-parameter vector produced by
    /// [`ModelParams::free_params`].
    pub fn from_free(k: usize, p: usize, d: usize, free: &[f64]) -> Result<Self> {
        if free.len() != param_count(k, p, d) {
            return Err(Error::dim("free-parameter vector has the wrong length"));
        }
        let q = p + 1;
        let nb = (k - 1) * q;
        let mut beta = vec![0.0; q];
        beta.extend_from_slice(&free[..nb]);
        Self::new(k, p, d, beta, free[nb..].to_vec())
    }

    pub fn n_components(&self) -> usize {
        self.n_components
    }

    pub fn n_covariates(&self) -> usize {
        self.n_covariates
    }

    pub fn n_outcomes(&self) -> usize {
        self.n_outcomes
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn beta_row(&self, k: usize) -> &[f64] {
        let q = self.n_covariates + 1;
        &self.beta[k * q..(k + 1) * q]
    }

    pub fn theta_row(&self, k: usize) -> &[f64] {
        let d = self.n_outcomes;
        &self.theta[k * d..(k + 1) * d]
    }

    pub fn n_free(&self) -> usize {
        param_count(self.n_components, self.n_covariates, self.n_outcomes)
    }

    /// Free parameters: beta rows `2..K` followed by all of theta, row-major.
    pub fn free_params(&self) -> Vec<f64> {
        let q = self.n_covariates + 1;
        let mut v = Vec::with_capacity(self.n_free());
        v.extend_from_slice(&self.beta[q..]);
        v.extend_from_slice(&self.theta);
        v
    }

    /// Names aligned with [`ModelParams::free_params`]; components and
    /// outcomes are numbered from 1, covariate slot 0 is the intercept.
    pub fn free_param_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.n_free());
        for k in 1..self.n_components {
            names.push(format!("beta_{}_intercept", k + 1));
            for c in 1..=self.n_covariates {
                names.push(format!("beta_{}_x{}", k + 1, c));
            }
        }
        for k in 0..self.n_components {
            for j in 0..self.n_outcomes {
                names.push(format!("theta_{}_{}", k + 1, j + 1));
            }
        }
        names
    }

    /// Euclidean distance between the free-parameter vectors.
    pub fn free_distance(&self, other: &ModelParams) -> f64 {
        numeric::l2_distance(&self.free_params(), &other.free_params())
    }

    pub(crate) fn set_beta(&mut self, beta: Vec<f64>) {
        debug_assert_eq!(beta.len(), self.beta.len());
        self.beta = beta;
    }

    pub(crate) fn set_theta(&mut self, theta: Vec<f64>) {
        debug_assert_eq!(theta.len(), self.theta.len());
        self.theta = theta.into_iter().map(clamp_theta).collect();
    }

    /// Relabels components: new component `i` is old component `perm[i]`.
    /// Gating coefficients are re-referenced so the new first row is zero;
    /// the implied distribution is unchanged.
    pub fn permute_components(&self, perm: &[usize]) -> Result<ModelParams> {
        let k = self.n_components;
        let mut seen = vec![false; k];
        if perm.len() != k || perm.iter().any(|&i| i >= k || std::mem::replace(&mut seen[i], true)) {
            return Err(Error::domain("not a permutation of the component indices"));
        }
        let q = self.n_covariates + 1;
        let reference = self.beta_row(perm[0]).to_vec();
        let mut beta = Vec::with_capacity(k * q);
        let mut theta = Vec::with_capacity(self.theta.len());
        for &old in perm {
            beta.extend(self.beta_row(old).iter().zip(&reference).map(|(b, r)| b - r));
            theta.extend_from_slice(self.theta_row(old));
        }
        for b in &mut beta[..q] {
            *b = 0.0;
        }
        Ok(ModelParams {
            beta,
            theta,
            ..self.clone()
        })
    }

    /// Component order by descending mean success probability (ties by index).
    pub fn severity_order(&self) -> Vec<usize> {
        let means: Vec<f64> = (0..self.n_components)
            .map(|k| self.theta_row(k).iter().sum::<f64>() / self.n_outcomes as f64)
            .collect();
        let mut order: Vec<usize> = (0..self.n_components).collect();
        order.sort_by(|&a, &b| means[b].total_cmp(&means[a]).then(a.cmp(&b)));
        order
    }

    /// Presentation copy with components in [`ModelParams::severity_order`].
    pub fn canonicalized(&self) -> ModelParams {
        self.permute_components(&self.severity_order())
            .expect("severity order is a permutation")
    }

    pub(crate) fn check_compatible(&self, data: &Dataset) -> Result<()> {
        if data.n_covariates() != self.n_covariates {
            return Err(Error::dim(format!(
                "model has {} covariates, data has {}",
                self.n_covariates,
                data.n_covariates()
            )));
        }
        if data.n_outcomes() != self.n_outcomes {
            return Err(Error::dim(format!(
                "model has {} outcomes, data has {}",
                self.n_outcomes,
                data.n_outcomes()
            )));
        }
        Ok(())
    }
}

/// `log C(N,y) + y log(theta) + (N-y) log(1-theta)`.
pub fn binomial_log_pmf(y: u32, n: u32, theta: f64) -> Result<f64> {
    if y > n {
        return Err(Error::domain(format!("binomial outcome {y} exceeds trials {n}")));
    }
    if !(theta > 0.0 && theta < 1.0) {
        return Err(Error::domain(format!("binomial probability {theta} outside (0, 1)")));
    }
    let ln = |v: u32| statrs::function::gamma::ln_gamma(v as f64 + 1.0);
    Ok(ln(n) - ln(y) - ln(n - y) + y as f64 * theta.ln() + (n - y) as f64 * (1.0 - theta).ln())
}

/// Writes `log w_k(x)` for every component into `out`.
#[inline]
pub(crate) fn log_gates_into(params: &ModelParams, x: &[f64], out: &mut [f64]) {
    let q = params.n_covariates + 1;
    for (k, o) in out.iter_mut().enumerate() {
        let row = &params.beta[k * q..(k + 1) * q];
        let mut eta = row[0];
        for (b, xc) in row[1..].iter().zip(x) {
            eta += b * xc;
        }
        *o = eta;
    }
    let norm = numeric::lse(out);
    for o in out.iter_mut() {
        *o -= norm;
    }
}

pub fn log_gating_weights(x: &[f64], params: &ModelParams) -> Result<Vec<f64>> {
    if x.len() != params.n_covariates {
        return Err(Error::dim(format!(
            "covariate vector has length {}, model expects {}",
            x.len(),
            params.n_covariates
        )));
    }
    let mut out = vec![0.0; params.n_components];
    log_gates_into(params, x, &mut out);
    Ok(out)
}

/// Softmax gating probabilities `w_k(x)`; the reference class uses `beta_1 = 0`.
pub fn gating_weights(x: &[f64], params: &ModelParams) -> Result<Vec<f64>> {
    Ok(log_gating_weights(x, params)?.into_iter().map(f64::exp).collect())
}

/// Cached `log(theta)` and `log(1 - theta)` for fast density evaluation.
#[derive(Debug, Clone)]
pub(crate) struct ThetaLogs {
    d: usize,
    log_t: Vec<f64>,
    log_1mt: Vec<f64>,
}

impl ThetaLogs {
    pub(crate) fn new(params: &ModelParams) -> Self {
        ThetaLogs {
            d: params.n_outcomes,
            log_t: params.theta.iter().map(|t| t.ln()).collect(),
            log_1mt: params.theta.iter().map(|t| (1.0 - t).ln()).collect(),
        }
    }

    /// Kernel `y log(theta_kj) + (N_j - y) log(1 - theta_kj)` (no binomial coefficient).
    #[inline]
    pub(crate) fn kernel(&self, k: usize, j: usize, y: u32, n: u32) -> f64 {
        let idx = k * self.d + j;
        y as f64 * self.log_t[idx] + (n - y) as f64 * self.log_1mt[idx]
    }
}

fn check_row(y: &[u32], spec: &OutcomeSpec) -> Result<()> {
    if y.len() != spec.n_outcomes() {
        return Err(Error::dim(format!(
            "outcome vector has length {}, expected {}",
            y.len(),
            spec.n_outcomes()
        )));
    }
    for (j, &v) in y.iter().enumerate() {
        if v > spec.max(j) {
            return Err(Error::domain(format!("outcome {j} = {v} exceeds maximum {}", spec.max(j))));
        }
    }
    Ok(())
}

/// `log p_k(y)` for a fully observed outcome vector.
pub fn component_log_density(y: &[u32], params: &ModelParams, k: usize, spec: &OutcomeSpec) -> Result<f64> {
    check_row(y, spec)?;
    if k >= params.n_components || spec.n_outcomes() != params.n_outcomes {
        return Err(Error::dim("component index or outcome count does not match the model"));
    }
    let theta = params.theta_row(k);
    y.iter()
        .enumerate()
        .map(|(j, &v)| binomial_log_pmf(v, spec.max(j), theta[j]))
        .sum()
}

/// `log p_{k,r}(y_r)`: the binomial product over observed coordinates only.
/// `y_obs` lists the observed values in coordinate order.
pub fn pattern_log_density(
    y_obs: &[u32],
    pattern: &MissingPattern,
    params: &ModelParams,
    k: usize,
    spec: &OutcomeSpec,
) -> Result<f64> {
    if pattern.len() != spec.n_outcomes() || pattern.n_observed() != y_obs.len() {
        return Err(Error::dim(format!(
            "pattern {pattern} does not match {} observed values",
            y_obs.len()
        )));
    }
    if k >= params.n_components || spec.n_outcomes() != params.n_outcomes {
        return Err(Error::dim("component index or outcome count does not match the model"));
    }
    let theta = params.theta_row(k);
    pattern
        .observed_indices()
        .into_iter()
        .zip(y_obs)
        .map(|(j, &v)| binomial_log_pmf(v, spec.max(j), theta[j]))
        .sum()
}

/// Per-row joint log terms `log w_k(x) + log p_{k,r}(y_r)` for all `k`, written
/// into `out`; returns the binomial-coefficient constant shared by every component.
#[inline]
pub(crate) fn row_log_joint(
    params: &ModelParams,
    logs: &ThetaLogs,
    spec: &OutcomeSpec,
    x: &[f64],
    y: &[Option<u32>],
    out: &mut [f64],
) -> f64 {
    log_gates_into(params, x, out);
    let mut constant = 0.0;
    for (j, cell) in y.iter().enumerate() {
        if let Some(v) = *cell {
            let n = spec.max(j);
            constant += spec.log_binom(j, v);
            for (k, o) in out.iter_mut().enumerate() {
                *o += logs.kernel(k, j, v, n);
            }
        }
    }
    constant
}

/// Latent incomplete log-likelihood `sum_i log sum_k w_k(X_i) p_k(Y_i)`;
/// requires complete outcomes.
pub fn li_log_likelihood(data: &Dataset, params: &ModelParams) -> Result<f64> {
    if !data.is_complete() {
        return Err(Error::domain(
            "latent incomplete log-likelihood needs complete outcomes; use obs_log_likelihood",
        ));
    }
    obs_log_likelihood(data, params)
}

/// Observed-data log-likelihood `sum_i log sum_k w_k(X_i) p_{k,R_i}(Y_{i,R_i})`.
/// A row with every outcome missing contributes zero.
pub fn obs_log_likelihood(data: &Dataset, params: &ModelParams) -> Result<f64> {
    params.check_compatible(data)?;
    let logs = ThetaLogs::new(params);
    let mut buf = vec![0.0; params.n_components];
    let mut total = CompensatedSum::default();
    for i in 0..data.n_rows() {
        let c = row_log_joint(params, &logs, data.spec(), data.covariate_row(i), data.outcome_row(i), &mut buf);
        total.add(c + numeric::lse(&buf));
    }
    Ok(total.value())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_class(beta2: Vec<f64>) -> ModelParams {
        let p = beta2.len() - 1;
        let mut beta = vec![0.0; p + 1];
        beta.extend(beta2);
        ModelParams::new(2, p, 2, beta, vec![0.3, 0.6, 0.7, 0.2]).unwrap()
    }

    #[test]
    fn param_count_examples() {
        assert_eq!(param_count(1, 4, 7), 7);
        assert_eq!(param_count(3, 2, 4), 18);
        assert_eq!(param_count(5, 4, 8), 60);
    }

    #[test]
    fn binomial_values() {
        let v = binomial_log_pmf(2, 5, 0.5).unwrap();
        assert!((v - (-1.163_150_809_805_680_9)).abs() < 1e-12);
        let v = binomial_log_pmf(5, 5, 0.5).unwrap();
        assert!((v - (-3.465_735_902_799_726_5)).abs() < 1e-12);
        let v = binomial_log_pmf(0, 5, THETA_MIN).unwrap();
        assert!(v.abs() < 1e-5);
        assert!(binomial_log_pmf(6, 5, 0.5).is_err());
        assert!(binomial_log_pmf(1, 5, 1.0).is_err());
    }

    #[test]
    fn symmetric_gates() {
        let m = two_class(vec![0.0, 0.0]);
        for x in [-3.0, 0.0, 17.0] {
            let w = gating_weights(&[x], &m).unwrap();
            assert!((w[0] - 0.5).abs() < 1e-15 && (w[1] - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn analytic_softmax_gates() {
        let m = two_class(vec![3f64.ln(), 0.0, 0.0]);
        let w = gating_weights(&[1.3, -8.0], &m).unwrap();
        assert!((w[0] - 0.25).abs() < 1e-14);
        assert!((w[1] - 0.75).abs() < 1e-14);
        assert!(gating_weights(&[1.0], &m).is_err());
    }

    #[test]
    fn reference_row_must_be_zero() {
        assert!(ModelParams::new(2, 1, 1, vec![0.1, 0.0, 0.0, 0.0], vec![0.5, 0.5]).is_err());
        assert!(ModelParams::new(1, 0, 1, vec![0.0], vec![1.5]).is_err());
    }

    #[test]
    fn theta_is_clamped() {
        let m = ModelParams::new(1, 0, 2, vec![0.0], vec![0.0, 1.0]).unwrap();
        assert_eq!(m.theta(), &[THETA_MIN, THETA_MAX]);
    }

    #[test]
    fn free_roundtrip() {
        let m = ModelParams::new(3, 1, 2, vec![0., 0., 0.5, -1., 2., 0.25], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let f = m.free_params();
        assert_eq!(f.len(), m.n_free());
        assert_eq!(m.free_param_names().len(), f.len());
        assert_eq!(ModelParams::from_free(3, 1, 2, &f).unwrap(), m);
    }

    #[test]
    fn permutation_preserves_gates() {
        let m = ModelParams::new(3, 1, 2, vec![0., 0., 0.5, -1., 2., 0.25], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let perm = [2, 0, 1];
        let pm = m.permute_components(&perm).unwrap();
        assert!(pm.beta_row(0).iter().all(|&b| b == 0.0));
        let w = gating_weights(&[0.7], &m).unwrap();
        let pw = gating_weights(&[0.7], &pm).unwrap();
        for (i, &old) in perm.iter().enumerate() {
            assert!((pw[i] - w[old]).abs() < 1e-14);
            assert_eq!(pm.theta_row(i), m.theta_row(old));
        }
        assert!(m.permute_components(&[0, 0, 1]).is_err());
    }

    #[test]
    fn canonical_order_is_descending_theta() {
        let m = ModelParams::new(3, 0, 1, vec![0., 1., 2.], vec![0.2, 0.9, 0.5]).unwrap();
        assert_eq!(m.severity_order(), vec![1, 2, 0]);
        let c = m.canonicalized();
        assert_eq!(c.theta(), &[0.9, 0.5, 0.2]);
    }

    #[test]
    fn pattern_density_edge_cases() {
        let spec = OutcomeSpec::uniform(2, 4).unwrap();
        let m = two_class(vec![0.0, 0.0]);
        let all = MissingPattern::complete(2);
        let a = pattern_log_density(&[1, 3], &all, &m, 1, &spec).unwrap();
        let b = component_log_density(&[1, 3], &m, 1, &spec).unwrap();
        assert_eq!(a, b);
        let none = MissingPattern::new(vec![false, false]);
        assert_eq!(pattern_log_density(&[], &none, &m, 0, &spec).unwrap(), 0.0);
        assert!(pattern_log_density(&[1], &all, &m, 0, &spec).is_err());
    }

    #[test]
    fn all_missing_row_contributes_zero() {
        let spec = OutcomeSpec::uniform(2, 4).unwrap();
        let m = two_class(vec![0.4, -0.3]);
        let ds = Dataset::new(vec![vec![1.2]], vec![vec![None, None]], spec).unwrap();
        assert!(obs_log_likelihood(&ds, &m).unwrap().abs() < 1e-15);
        assert!(li_log_likelihood(&ds, &m).is_err());
    }
}
