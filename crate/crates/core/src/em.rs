//! EM for the mixture on complete outcome data.
//!
//! Each iteration computes class posteriors, sets `theta` to posterior-weighted
//! sample proportions and refits the gating regression on the posteriors as
//! soft targets, warm-started at the current `beta`. A fit runs several random
//! initializations and keeps the one with the highest log-likelihood.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, OutcomeSpec};
use crate::error::{Error, Result};
use crate::gating::{self, CovariateView, GatingConfig, SoftTargetMatrix};
use crate::model::{self, ModelParams, ThetaLogs};
use crate::numeric::{self, CompensatedSum};
use crate::rng::{tags, StreamRng, StreamSeed};

/// Components whose total posterior weight drops below this abort the run.
pub const DEGENERATE_WEIGHT: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    /// Stop when the L2 change of the free parameters falls below this.
    pub tolerance: f64,
    pub max_iterations: usize,
    pub n_random_inits: usize,
    pub seed: u64,
    pub gating: GatingConfig,
    /// Keep the per-iteration log-likelihoods and parameters of the chosen run.
    #[serde(default)]
    pub record_trace: bool,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            tolerance: 1e-4,
            max_iterations: 1000,
            n_random_inits: 20,
            seed: 0,
            gating: GatingConfig::default(),
            record_trace: false,
        }
    }
}

impl EmConfig {
    pub(crate) fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) {
            return Err(Error::Config(format!("tolerance must be positive, got {}", self.tolerance)));
        }
        if self.max_iterations == 0 {
            return Err(Error::Config("max_iterations must be at least 1".into()));
        }
        if self.n_random_inits == 0 {
            return Err(Error::Config("n_random_inits must be at least 1".into()));
        }
        if !(self.gating.ridge >= 0.0 && self.gating.ridge.is_finite()) {
            return Err(Error::Config(format!("gating ridge must be finite and nonnegative, got {}", self.gating.ridge)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    Tolerance,
    MaxIterations,
    /// The observed log-likelihood stayed within Monte Carlo noise (MCEM only).
    MonteCarloPlateau,
}

/// Iterates of one run: entry `t` holds the state after `t` updates.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FitTrace {
    pub log_likelihoods: Vec<f64>,
    pub params: Vec<ModelParams>,
    /// Monte Carlo slack per outer iteration (MCEM only; entry `t` pairs with
    /// the step from `t` to `t + 1`).
    pub slack: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub params: ModelParams,
    /// Log-likelihood at `params` (latent incomplete for EM, observed for MCEM).
    pub log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
    pub stop_reason: StopReason,
    /// Final log-likelihood of every initialization; `None` marks a failed run.
    pub init_log_likelihoods: Vec<Option<f64>>,
    pub best_init: usize,
    pub seed: u64,
    pub trace: Option<FitTrace>,
}

impl FitReport {
    pub fn failed_inits(&self) -> usize {
        self.init_log_likelihoods.iter().filter(|v| v.is_none()).count()
    }
}

/// `n x K` class-membership probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorMatrix {
    rows: usize,
    components: usize,
    values: Vec<f64>,
}

impl PosteriorMatrix {
    pub(crate) fn from_raw(values: Vec<f64>, rows: usize, components: usize) -> Self {
        debug_assert_eq!(values.len(), rows * components);
        PosteriorMatrix { rows, components, values }
    }

    pub fn n_rows(&self) -> usize {
        self.rows
    }

    pub fn n_components(&self) -> usize {
        self.components
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.components..(i + 1) * self.components]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn to_soft_targets(&self) -> SoftTargetMatrix {
        SoftTargetMatrix::from_posteriors(self.values.clone(), self.rows, self.components)
    }
}

/// Dense complete rows with optional per-row multiplicities; the common input
/// of plain EM and of the stacked inner fits of MCEM.
#[derive(Debug, Clone)]
pub(crate) struct WeightedRows {
    pub(crate) n: usize,
    pub(crate) p: usize,
    pub(crate) x: Vec<f64>,
    pub(crate) y: Vec<u32>,
    pub(crate) weights: Option<Vec<f64>>,
    pub(crate) spec: OutcomeSpec,
}

impl WeightedRows {
    pub(crate) fn from_dataset(data: &Dataset) -> Result<Self> {
        Ok(WeightedRows {
            n: data.n_rows(),
            p: data.n_covariates(),
            x: data.covariates_flat().to_vec(),
            y: data.dense_outcomes()?,
            weights: None,
            spec: data.spec().clone(),
        })
    }

    fn d(&self) -> usize {
        self.spec.n_outcomes()
    }

    #[inline]
    fn weight(&self, i: usize) -> f64 {
        self.weights.as_ref().map_or(1.0, |w| w[i])
    }

    fn covariates(&self) -> CovariateView<'_> {
        CovariateView::new(&self.x, self.n, self.p).expect("consistent buffers")
    }

    /// Per-row log mixture densities; fills `post` with posteriors when given.
    pub(crate) fn row_log_likelihoods(&self, params: &ModelParams, mut post: Option<&mut [f64]>) -> Vec<f64> {
        let k = params.n_components();
        let d = self.d();
        let logs = ThetaLogs::new(params);
        let mut buf = vec![0.0; k];
        let mut out = Vec::with_capacity(self.n);
        for i in 0..self.n {
            model::log_gates_into(params, &self.x[i * self.p..(i + 1) * self.p], &mut buf);
            let mut constant = 0.0;
            for (j, &v) in self.y[i * d..(i + 1) * d].iter().enumerate() {
                let nj = self.spec.max(j);
                constant += self.spec.log_binom(j, v);
                for (c, b) in buf.iter_mut().enumerate() {
                    *b += logs.kernel(c, j, v, nj);
                }
            }
            let norm = numeric::lse(&buf);
            if let Some(post) = post.as_deref_mut() {
                for (dst, b) in post[i * k..(i + 1) * k].iter_mut().zip(&buf) {
                    *dst = (b - norm).exp();
                }
            }
            out.push(constant + norm);
        }
        out
    }

    /// E-step: posteriors and the (weighted) log-likelihood.
    fn e_step(&self, params: &ModelParams, post: &mut [f64]) -> f64 {
        let rows = self.row_log_likelihoods(params, Some(post));
        let mut total = CompensatedSum::default();
        for (i, l) in rows.into_iter().enumerate() {
            total.add(self.weight(i) * l);
        }
        total.value()
    }

    fn theta_update(&self, post: &[f64], k: usize) -> Result<Vec<f64>> {
        let d = self.d();
        let mut mass = vec![0.0; k];
        let mut sums = vec![0.0; k * d];
        for i in 0..self.n {
            let c = self.weight(i);
            let yi = &self.y[i * d..(i + 1) * d];
            for comp in 0..k {
                let w = c * post[i * k + comp];
                mass[comp] += w;
                for (s, &v) in sums[comp * d..(comp + 1) * d].iter_mut().zip(yi) {
                    *s += w * v as f64;
                }
            }
        }
        for (comp, &m) in mass.iter().enumerate() {
            if !(m >= DEGENERATE_WEIGHT) {
                return Err(Error::DegenerateComponent {
                    component: comp,
                    weight: m,
                });
            }
        }
        Ok((0..k * d)
            .map(|idx| {
                let (comp, j) = (idx / d, idx % d);
                model::clamp_theta(sums[idx] / self.spec.max(j) as f64 / mass[comp])
            })
            .collect())
    }
}

/// Posterior class probabilities `w_k p_k / sum_k' w_k' p_k'` on complete data.
pub fn posterior_weights(data: &Dataset, params: &ModelParams) -> Result<PosteriorMatrix> {
    params.check_compatible(data)?;
    let rows = WeightedRows::from_dataset(data)?;
    let k = params.n_components();
    let mut post = vec![0.0; rows.n * k];
    rows.row_log_likelihoods(params, Some(&mut post));
    Ok(PosteriorMatrix::from_raw(post, rows.n, k))
}

/// Posterior-weighted sample proportions, clamped; returned row-major `K x d`.
pub fn update_theta(data: &Dataset, posteriors: &PosteriorMatrix, spec: &OutcomeSpec) -> Result<Vec<f64>> {
    if posteriors.n_rows() != data.n_rows() {
        return Err(Error::dim("posterior rows do not match data rows"));
    }
    if spec != data.spec() {
        return Err(Error::dim("outcome spec differs from the dataset's"));
    }
    let rows = WeightedRows::from_dataset(data)?;
    rows.theta_update(posteriors.values(), posteriors.n_components())
}

/// Random starting point: intercepts `U[-1, 1]`, slopes `U[-0.5, 0.5]`,
/// success probabilities `U[0.1, 0.9]`.
pub fn random_init(k: usize, p: usize, d: usize, rng: &mut StreamRng) -> Result<ModelParams> {
    let q = p + 1;
    let mut beta = vec![0.0; k * q];
    for row in beta.chunks_mut(q).skip(1) {
        row[0] = rng.random_range(-1.0..=1.0);
        for b in &mut row[1..] {
            *b = rng.random_range(-0.5..=0.5);
        }
    }
    let theta = (0..k * d).map(|_| rng.random_range(0.1..=0.9)).collect();
    ModelParams::new(k, p, d, beta, theta)
}

pub(crate) fn init_stream(seed: u64, run: usize) -> StreamSeed {
    StreamSeed::new(seed).child(tags::INIT).child(run as u64)
}

pub(crate) struct RunOutcome {
    pub(crate) params: ModelParams,
    pub(crate) log_likelihood: f64,
    pub(crate) iterations: usize,
    pub(crate) converged: bool,
    pub(crate) stop_reason: StopReason,
    pub(crate) trace: Option<FitTrace>,
}

/// One EM run from `init`.
pub(crate) fn run_em(rows: &WeightedRows, init: ModelParams, config: &EmConfig) -> Result<RunOutcome> {
    let k = init.n_components();
    let mut params = init;
    let mut post = vec![0.0; rows.n * k];
    let mut ll = rows.e_step(&params, &mut post);
    let mut trace = config.record_trace.then(|| FitTrace {
        log_likelihoods: vec![ll],
        params: vec![params.clone()],
        slack: Vec::new(),
    });
    let x = rows.covariates();
    let mut iterations = 0;
    let mut stop_reason = StopReason::MaxIterations;
    while iterations < config.max_iterations {
        let theta = rows.theta_update(&post, k)?;
        let targets = SoftTargetMatrix::from_posteriors(std::mem::take(&mut post), rows.n, k);
        let fit = gating::fit_weighted_logistic_rows(
            x,
            &targets,
            rows.weights.as_deref(),
            params.beta(),
            &config.gating,
        )?;
        post = targets.values().to_vec();
        let mut next = params.clone();
        next.set_beta(fit.beta);
        next.set_theta(theta);
        let change = next.free_distance(&params);
        params = next;
        ll = rows.e_step(&params, &mut post);
        iterations += 1;
        if !ll.is_finite() {
            return Err(Error::Optimization(format!("log-likelihood became {ll}")));
        }
        if let Some(t) = trace.as_mut() {
            t.log_likelihoods.push(ll);
            t.params.push(params.clone());
        }
        if change < config.tolerance {
            stop_reason = StopReason::Tolerance;
            break;
        }
    }
    Ok(RunOutcome {
        params,
        log_likelihood: ll,
        iterations,
        converged: stop_reason == StopReason::Tolerance,
        stop_reason,
        trace,
    })
}

/// Runs `runner` for each start (given `init` or random ones) and keeps the
/// highest log-likelihood; ties go to the lowest run index.
pub(crate) fn multi_start<F>(k: usize, p: usize, d: usize, config: &EmConfig, init: Option<&ModelParams>, runner: F) -> Result<FitReport>
where
    F: Fn(usize, ModelParams) -> Result<RunOutcome> + Sync,
{
    config.validate()?;
    if k == 0 {
        return Err(Error::Config("need at least one component".into()));
    }
    let starts: Vec<usize> = match init {
        Some(_) => vec![0],
        None => (0..config.n_random_inits).collect(),
    };
    let outcomes: Vec<Result<RunOutcome>> = starts
        .into_par_iter()
        .map(|run| {
            let start = match init {
                Some(p0) => p0.clone(),
                None => random_init(k, p, d, &mut init_stream(config.seed, run).rng())?,
            };
            runner(run, start)
        })
        .collect();

    let init_log_likelihoods: Vec<Option<f64>> = outcomes
        .iter()
        .map(|o| o.as_ref().ok().map(|r| r.log_likelihood))
        .collect();
    let mut best: Option<usize> = None;
    for (i, ll) in init_log_likelihoods.iter().enumerate() {
        if let Some(v) = ll {
            if best.is_none_or(|b| *v > init_log_likelihoods[b].expect("present")) {
                best = Some(i);
            }
        }
    }
    let Some(best) = best else {
        let last = outcomes.into_iter().filter_map(|o| o.err()).last();
        return Err(Error::Convergence(format!(
            "every initialization failed; last error: {}",
            last.map_or_else(|| "none".into(), |e| e.to_string())
        )));
    };
    let run = outcomes.into_iter().nth(best).expect("index in range").expect("successful run");
    Ok(FitReport {
        params: run.params,
        log_likelihood: run.log_likelihood,
        iterations: run.iterations,
        converged: run.converged,
        stop_reason: run.stop_reason,
        init_log_likelihoods,
        best_init: best,
        seed: config.seed,
        trace: run.trace,
    })
}

/// Fits a `k`-component mixture to complete data. With `init` a single run
/// starts there; otherwise `n_random_inits` random starts are used.
pub fn fit_em(data: &Dataset, k: usize, config: &EmConfig, init: Option<&ModelParams>) -> Result<FitReport> {
    if !data.is_complete() {
        return Err(Error::domain("EM needs complete outcomes; use fit_mcem for missing data"));
    }
    if let Some(p0) = init {
        p0.check_compatible(data)?;
        if p0.n_components() != k {
            return Err(Error::dim(format!("initial point has {} components, expected {k}", p0.n_components())));
        }
    }
    let rows = WeightedRows::from_dataset(data)?;
    multi_start(k, data.n_covariates(), data.n_outcomes(), config, init, |_, start| {
        run_em(&rows, start, config)
    })
}
