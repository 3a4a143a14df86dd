//! Monte Carlo EM for data with missing outcomes.
//!
//! Each outer iteration imputes `M` completed copies of the data from the
//! current parameters, stacks them and runs EM on the stack, warm-started at
//! the current parameters with a single start. Complete rows are identical in
//! every copy, so the stack stores them once with weight `M`.
//!
//! The outer loop stops when the free parameters move less than the tolerance,
//! or when the observed log-likelihood has stayed within Monte Carlo noise for
//! a window of consecutive iterations. The noise level is
//! `3 * sd(per-copy log-likelihoods) / sqrt(M)`.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::em::{self, EmConfig, FitReport, FitTrace, RunOutcome, StopReason, WeightedRows};
use crate::error::{Error, Result};
use crate::imputation::Imputer;
use crate::model::{self, ModelParams};
use crate::rng::{tags, StreamSeed};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McemConfig {
    /// Tolerances, start count, seed and gating settings shared with the inner EM.
    pub em: EmConfig,
    /// Imputed copies per outer iteration.
    pub n_imputations: usize,
    pub max_outer_iterations: usize,
    /// Consecutive outer iterations within Monte Carlo noise before stopping.
    pub plateau_window: usize,
}

impl Default for McemConfig {
    fn default() -> Self {
        McemConfig {
            em: EmConfig::default(),
            n_imputations: 10,
            max_outer_iterations: 100,
            plateau_window: 5,
        }
    }
}

impl McemConfig {
    fn validate(&self) -> Result<()> {
        self.em.validate()?;
        if self.n_imputations == 0 {
            return Err(Error::Config("the number of imputations must be at least 1".into()));
        }
        if self.max_outer_iterations == 0 {
            return Err(Error::Config("max_outer_iterations must be at least 1".into()));
        }
        if self.plateau_window == 0 {
            return Err(Error::Config("plateau_window must be at least 1".into()));
        }
        Ok(())
    }
}

fn sample_sd(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
}

struct Stack {
    rows: WeightedRows,
    n_complete: usize,
    n_incomplete: usize,
}

impl Stack {
    /// Complete rows first (weight `M`), then `M` blocks of the incomplete rows.
    fn new(data: &Dataset, incomplete: &[usize], m: usize) -> Self {
        let p = data.n_covariates();
        let d = data.n_outcomes();
        let complete: Vec<usize> = (0..data.n_rows()).filter(|&i| data.pattern(i).is_complete()).collect();
        let n = complete.len() + m * incomplete.len();
        let mut x = Vec::with_capacity(n * p);
        let mut y = Vec::with_capacity(n * d);
        for &i in &complete {
            x.extend_from_slice(data.covariate_row(i));
            y.extend(data.outcome_row(i).iter().map(|c| c.expect("complete row")));
        }
        for _ in 0..m {
            for &i in incomplete {
                x.extend_from_slice(data.covariate_row(i));
            }
        }
        let mut weights = vec![m as f64; complete.len()];
        weights.resize(n, 1.0);
        Stack {
            rows: WeightedRows {
                n,
                p,
                x,
                y,
                weights: Some(weights),
                spec: data.spec().clone(),
            },
            n_complete: complete.len(),
            n_incomplete: incomplete.len(),
        }
    }

    fn fill(&mut self, block: usize, draws: &[u32]) {
        let d = self.rows.spec.n_outcomes();
        let start = (self.n_complete + block * self.n_incomplete) * d;
        let end = start + draws.len();
        if self.rows.y.len() < end {
            self.rows.y.resize(end, 0);
        }
        self.rows.y[start..end].copy_from_slice(draws);
    }

    /// Log-likelihood of each imputed copy taken as a complete dataset.
    fn per_copy_log_likelihoods(&self, params: &ModelParams, m: usize) -> Vec<f64> {
        let rows = self.rows.row_log_likelihoods(params, None);
        let base: f64 = rows[..self.n_complete].iter().sum();
        (0..m)
            .map(|c| {
                let s = self.n_complete + c * self.n_incomplete;
                base + rows[s..s + self.n_incomplete].iter().sum::<f64>()
            })
            .collect()
    }
}

fn run_mcem(data: &Dataset, init: ModelParams, config: &McemConfig, stream: StreamSeed) -> Result<RunOutcome> {
    let m = config.n_imputations;
    let inner = EmConfig {
        n_random_inits: 1,
        record_trace: false,
        ..config.em.clone()
    };
    let mut params = init;
    let mut ll = model::obs_log_likelihood(data, &params)?;
    let mut trace = config.em.record_trace.then(|| FitTrace {
        log_likelihoods: vec![ll],
        params: vec![params.clone()],
        slack: Vec::new(),
    });
    let incomplete: Vec<usize> = (0..data.n_rows()).filter(|&i| !data.pattern(i).is_complete()).collect();
    let mut stack = Stack::new(data, &incomplete, m);
    let mut history = vec![ll];
    let mut streak = 0;
    let mut iterations = 0;
    let mut stop_reason = StopReason::MaxIterations;
    while iterations < config.max_outer_iterations {
        let imputer = Imputer::new(data, &params)?;
        let step = stream.child(iterations as u64);
        for c in 0..m {
            stack.fill(c, &imputer.draw_incomplete(&step.child(c as u64)));
        }
        let fit = em::run_em(&stack.rows, params.clone(), &inner)?;
        let slack = 3.0 * sample_sd(&stack.per_copy_log_likelihoods(&fit.params, m)) / (m as f64).sqrt();
        let change = fit.params.free_distance(&params);
        params = fit.params;
        let next = model::obs_log_likelihood(data, &params)?;
        iterations += 1;
        if let Some(t) = trace.as_mut() {
            t.log_likelihoods.push(next);
            t.params.push(params.clone());
            t.slack.push(slack);
        }
        if change < config.em.tolerance {
            ll = next;
            stop_reason = StopReason::Tolerance;
            break;
        }
        streak = if (next - ll).abs() <= slack { streak + 1 } else { 0 };
        history.push(next);
        ll = next;
        let w = config.plateau_window;
        if streak >= w && (next - history[history.len() - 1 - w]).abs() <= slack {
            stop_reason = StopReason::MonteCarloPlateau;
            break;
        }
    }
    Ok(RunOutcome {
        params,
        log_likelihood: ll,
        iterations,
        converged: stop_reason != StopReason::MaxIterations,
        stop_reason,
        trace,
    })
}

/// Fits a `k`-component mixture to data with missing outcomes. Without
/// missing cells this is exactly [`em::fit_em`]. Among random starts the one
/// with the highest observed log-likelihood is kept.
pub fn fit_mcem(data: &Dataset, k: usize, config: &McemConfig, init: Option<&ModelParams>) -> Result<FitReport> {
    config.validate()?;
    if data.is_complete() {
        return em::fit_em(data, k, &config.em, init);
    }
    if let Some(p0) = init {
        p0.check_compatible(data)?;
        if p0.n_components() != k {
            return Err(Error::dim(format!("initial point has {} components, expected {k}", p0.n_components())));
        }
    }
    let base = StreamSeed::new(config.em.seed).child(tags::IMPUTE);
    em::multi_start(k, data.n_covariates(), data.n_outcomes(), &config.em, init, |run, start| {
        run_mcem(data, start, config, base.child(run as u64))
    })
}
