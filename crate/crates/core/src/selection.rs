//! Choosing the number of components by AIC/BIC, and the generic
//! identifiability bound on the number of outcomes.

use std::io::Write;
use std::ops::RangeInclusive;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, OutcomeSpec};
use crate::em::FitReport;
use crate::error::{Error, Result};
use crate::mcem::{self, McemConfig};
use crate::model::{self, param_count};
use crate::rng::{tags, StreamSeed};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    Aic,
    Bic,
}

impl std::str::FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "aic" => Ok(Criterion::Aic),
            "bic" => Ok(Criterion::Bic),
            _ => Err(Error::Config(format!("unknown criterion {s:?}; expected aic or bic"))),
        }
    }
}

/// `2 nu - 2 loglik`.
pub fn aic_value(nu: usize, loglik: f64) -> f64 {
    2.0 * nu as f64 - 2.0 * loglik
}

/// `nu log(n) - 2 loglik`.
pub fn bic_value(nu: usize, loglik: f64, n: f64) -> f64 {
    nu as f64 * n.ln() - 2.0 * loglik
}

fn nu_of(fit: &FitReport) -> usize {
    let p = &fit.params;
    param_count(p.n_components(), p.n_covariates(), p.n_outcomes())
}

/// AIC of a fit, with the observed log-likelihood recomputed on `data`.
pub fn aic(fit: &FitReport, data: &Dataset) -> Result<f64> {
    Ok(aic_value(nu_of(fit), model::obs_log_likelihood(data, &fit.params)?))
}

pub fn bic(fit: &FitReport, data: &Dataset) -> Result<f64> {
    let ll = model::obs_log_likelihood(data, &fit.params)?;
    Ok(bic_value(nu_of(fit), ll, data.n_rows() as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRow {
    pub k: usize,
    pub nu: usize,
    pub loglik: Option<f64>,
    pub aic: Option<f64>,
    pub bic: Option<f64>,
    pub converged: bool,
    /// Whether `d` meets the identifiability bound for this `K` (advisory).
    pub identifiable: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub criterion: Criterion,
    pub rows: Vec<SelectionRow>,
    pub chosen_k: usize,
    pub warnings: Vec<String>,
}

impl SelectionResult {
    /// Minimizer of the other criterion over the same fits.
    pub fn argmin(&self, criterion: Criterion) -> Option<usize> {
        self.rows
            .iter()
            .filter_map(|r| {
                let v = match criterion {
                    Criterion::Aic => r.aic,
                    Criterion::Bic => r.bic,
                }?;
                Some((r.k, v))
            })
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(k, _)| k)
    }

    /// `K,nu,loglik,AIC,BIC,converged`; failed fits leave the numbers empty.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["K", "nu", "loglik", "AIC", "BIC", "converged"])?;
        let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
        for r in &self.rows {
            w.write_record([
                r.k.to_string(),
                r.nu.to_string(),
                opt(r.loglik),
                opt(r.aic),
                opt(r.bic),
                r.converged.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Seed used for the `K`-component fit inside [`select_k`].
pub fn seed_for_k(seed: u64, k: usize) -> u64 {
    StreamSeed::new(seed).child(tags::MODEL_SELECT).child(k as u64).derive_u64()
}

/// Fits every `K` in `k_range` with the full multi-start protocol and returns
/// the criterion curve and its minimizer. Fits that fail for every start
/// are reported and skipped.
pub fn select_k(data: &Dataset, k_range: RangeInclusive<usize>, criterion: Criterion, config: &McemConfig) -> Result<SelectionResult> {
    if k_range.is_empty() || *k_range.start() == 0 {
        return Err(Error::Config("the K range must be nonempty and start at 1 or more".into()));
    }
    let ks: Vec<usize> = k_range.collect();
    let n = data.n_rows() as f64;
    let rows: Vec<SelectionRow> = ks
        .par_iter()
        .map(|&k| {
            let nu = param_count(k, data.n_covariates(), data.n_outcomes());
            let identifiable = identifiability_bound(k, data.spec()).satisfied;
            let mut cfg = config.clone();
            cfg.em.seed = seed_for_k(config.em.seed, k);
            cfg.em.record_trace = false;
            match mcem::fit_mcem(data, k, &cfg, None).and_then(|fit| {
                let ll = model::obs_log_likelihood(data, &fit.params)?;
                Ok((fit, ll))
            }) {
                Ok((fit, ll)) => SelectionRow {
                    k,
                    nu,
                    loglik: Some(ll),
                    aic: Some(aic_value(nu, ll)),
                    bic: Some(bic_value(nu, ll, n)),
                    converged: fit.converged,
                    identifiable,
                    error: None,
                },
                Err(e) => SelectionRow {
                    k,
                    nu,
                    loglik: None,
                    aic: None,
                    bic: None,
                    converged: false,
                    identifiable,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    let mut warnings = Vec::new();
    for r in &rows {
        if let Some(e) = &r.error {
            warnings.push(format!("K={} failed and is excluded: {e}", r.k));
        }
        if !r.identifiable {
            warnings.push(format!("K={} exceeds the identifiability bound for d={}", r.k, data.n_outcomes()));
        }
    }
    let mut result = SelectionResult {
        criterion,
        rows,
        chosen_k: 0,
        warnings,
    };
    result.chosen_k = result
        .argmin(criterion)
        .ok_or_else(|| Error::Convergence("every K failed to fit".into()))?;
    Ok(result)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdentifiabilityCheck {
    pub satisfied: bool,
    /// `2 ceil(log_{1 + min N} K) + 1`.
    pub bound: usize,
}

/// Sufficient condition `d >= 2 ceil(log_{1+min_j N_j} K) + 1`, evaluated
/// with integer arithmetic.
pub fn identifiability_bound(k: usize, spec: &OutcomeSpec) -> IdentifiabilityCheck {
    let base = 1 + *spec.maxima().iter().min().expect("nonempty spec") as u128;
    let mut exponent = 0usize;
    let mut power: u128 = 1;
    while power < k as u128 {
        power = power.saturating_mul(base);
        exponent += 1;
    }
    let bound = 2 * exponent + 1;
    IdentifiabilityCheck {
        satisfied: spec.n_outcomes() >= bound,
        bound,
    }
}
