//! Nonparametric bootstrap standard errors and 95% intervals.
//!
//! Rows are resampled with replacement (covariates, observed outcomes and
//! missingness travel together) and every replicate is refit starting from
//! the point estimate without random restarts, which keeps component labels
//! aligned with the point estimate.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::mcem::{self, McemConfig};
use crate::model::ModelParams;
use crate::rng::{tags, StreamSeed};

/// Normal quantile used for 95% intervals.
pub const Z_95: f64 = 1.96;

/// Share of failed replicates above which a report carries a warning.
pub const FAILURE_WARNING_FRACTION: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IntervalKind {
    /// `estimate ± 1.96 se`.
    #[default]
    Normal,
    /// 2.5% and 97.5% replicate quantiles.
    Percentile,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BootstrapOptions {
    pub interval: IntervalKind,
    /// Exclude replicates whose components moved too far from the point estimate.
    pub label_check: bool,
}

impl BootstrapOptions {
    pub fn standard() -> Self {
        BootstrapOptions {
            interval: IntervalKind::Normal,
            label_check: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BootstrapStatus {
    Ok,
    /// More than 10% of the replicates failed or were excluded.
    Warning,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapReport {
    pub parameter_names: Vec<String>,
    pub estimate: Vec<f64>,
    /// Free-parameter vectors of the retained replicates.
    pub replicates: Vec<Vec<f64>>,
    pub standard_errors: Vec<f64>,
    pub ci_lower: Vec<f64>,
    pub ci_upper: Vec<f64>,
    pub b: usize,
    pub seed: u64,
    /// Replicates whose fit errored or did not converge.
    pub failed_replicates: usize,
    /// Replicates excluded because their components did not match the point estimate.
    pub label_switched: usize,
    pub status: BootstrapStatus,
    pub interval: IntervalKind,
}

impl BootstrapReport {
    /// One row per free parameter: `name,estimate,se,lower,upper`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["name", "estimate", "se", "lower", "upper"])?;
        for i in 0..self.estimate.len() {
            w.write_record([
                self.parameter_names[i].clone(),
                self.estimate[i].to_string(),
                self.standard_errors[i].to_string(),
                self.ci_lower[i].to_string(),
                self.ci_upper[i].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Whether `value` lies inside the interval of parameter `i`.
    pub fn covers(&self, i: usize, value: f64) -> bool {
        self.ci_lower[i] <= value && value <= self.ci_upper[i]
    }
}

/// Sample variance with the `n - 1` denominator.
pub fn sample_variance(values: &[f64]) -> Result<f64> {
    if values.len() < 2 {
        return Err(Error::domain("sample variance needs at least two values"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    Ok(values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0))
}

/// Linearly interpolated quantile of unsorted values, `q` in `[0, 1]`.
pub(crate) fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = q * (v.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

fn chebyshev(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Half the smallest L-infinity distance between two theta rows of `point`;
/// `None` for a single component.
fn label_radius(point: &ModelParams) -> Option<f64> {
    let k = point.n_components();
    let mut best: Option<f64> = None;
    for a in 0..k {
        for b in a + 1..k {
            let d = chebyshev(point.theta_row(a), point.theta_row(b));
            best = Some(best.map_or(d, |m: f64| m.min(d)));
        }
    }
    best.map(|d| 0.5 * d)
}

fn labels_match(point: &ModelParams, replicate: &ModelParams, radius: Option<f64>) -> bool {
    match radius {
        None => true,
        Some(r) => (0..point.n_components()).all(|k| chebyshev(point.theta_row(k), replicate.theta_row(k)) <= r),
    }
}

/// Row indices for replicate `b`.
pub fn resample_indices(n: usize, seed: u64, b: usize) -> Vec<usize> {
    let mut rng = StreamSeed::new(seed).child(tags::BOOTSTRAP).child(b as u64).rng();
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

/// Bootstrap with `b` replicates, normal intervals and the label check.
pub fn bootstrap(data: &Dataset, point: &ModelParams, b: usize, config: &McemConfig, seed: u64) -> Result<BootstrapReport> {
    bootstrap_with(data, point, b, config, seed, &BootstrapOptions::standard())
}

pub fn bootstrap_with(
    data: &Dataset,
    point: &ModelParams,
    b: usize,
    config: &McemConfig,
    seed: u64,
    options: &BootstrapOptions,
) -> Result<BootstrapReport> {
    if b < 2 {
        return Err(Error::Config("the bootstrap needs at least 2 replicates".into()));
    }
    let indices: Vec<Vec<usize>> = (0..b).map(|r| resample_indices(data.n_rows(), seed, r)).collect();
    bootstrap_from_indices(data, point, &indices, config, seed, options)
}

/// Bootstrap over caller-supplied resamples (one index vector per replicate).
pub fn bootstrap_from_indices(
    data: &Dataset,
    point: &ModelParams,
    indices: &[Vec<usize>],
    config: &McemConfig,
    seed: u64,
    options: &BootstrapOptions,
) -> Result<BootstrapReport> {
    point.check_compatible(data)?;
    if indices.iter().flatten().any(|&i| i >= data.n_rows()) {
        return Err(Error::domain("resample index out of range"));
    }
    let k = point.n_components();
    let radius = if options.label_check { label_radius(point) } else { None };
    let fits: Vec<Option<Result<ModelParams>>> = indices
        .par_iter()
        .enumerate()
        .map(|(r, rows)| {
            let mut cfg = config.clone();
            cfg.em.seed = StreamSeed::new(seed).child(tags::BOOTSTRAP).child(r as u64).derive_u64();
            cfg.em.record_trace = false;
            let sample = data.select_rows(rows);
            match mcem::fit_mcem(&sample, k, &cfg, Some(point)) {
                Ok(fit) if fit.converged => Some(Ok(fit.params)),
                Ok(_) => None,
                Err(Error::DegenerateComponent { .. }) | Err(Error::Optimization(_)) | Err(Error::Convergence(_)) => None,
                Err(e) => Some(Err(e)),
            }
        })
        .collect();

    let mut replicates = Vec::new();
    let mut failed = 0;
    let mut switched = 0;
    for f in fits {
        match f {
            None => failed += 1,
            Some(Err(e)) => return Err(e),
            Some(Ok(p)) if labels_match(point, &p, radius) => replicates.push(p.free_params()),
            Some(Ok(_)) => switched += 1,
        }
    }
    if replicates.len() < 2 {
        return Err(Error::Convergence(format!(
            "only {} of {} bootstrap replicates usable",
            replicates.len(),
            indices.len()
        )));
    }
    let estimate = point.free_params();
    let nf = estimate.len();
    let mut standard_errors = Vec::with_capacity(nf);
    let mut ci_lower = Vec::with_capacity(nf);
    let mut ci_upper = Vec::with_capacity(nf);
    for i in 0..nf {
        let column: Vec<f64> = replicates.iter().map(|r| r[i]).collect();
        let se = sample_variance(&column)?.sqrt();
        standard_errors.push(se);
        match options.interval {
            IntervalKind::Normal => {
                ci_lower.push(estimate[i] - Z_95 * se);
                ci_upper.push(estimate[i] + Z_95 * se);
            }
            IntervalKind::Percentile => {
                ci_lower.push(quantile(&column, 0.025));
                ci_upper.push(quantile(&column, 0.975));
            }
        }
    }
    let excluded = failed + switched;
    let status = if excluded as f64 > FAILURE_WARNING_FRACTION * indices.len() as f64 {
        BootstrapStatus::Warning
    } else {
        BootstrapStatus::Ok
    };
    Ok(BootstrapReport {
        parameter_names: point.free_param_names(),
        estimate,
        replicates,
        standard_errors,
        ci_lower,
        ci_upper,
        b: indices.len(),
        seed,
        failed_replicates: failed,
        label_switched: switched,
        status,
        interval: options.interval,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variance_hand_case() {
        let v = sample_variance(&[0.1, 0.2, 0.3]).unwrap();
        assert!((v - 0.01).abs() < 1e-15);
        assert!(sample_variance(&[1.0]).is_err());
    }

    #[test]
    fn quantile_interpolates() {
        let v = [4.0, 1.0, 3.0, 2.0, 5.0];
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert_eq!(quantile(&v, 0.5), 3.0);
        assert_eq!(quantile(&v, 0.125), 1.5);
    }

    #[test]
    fn label_radius_is_half_min_gap() {
        let p = ModelParams::new(3, 0, 2, vec![0.0; 3], vec![0.9, 0.9, 0.5, 0.6, 0.1, 0.2]).unwrap();
        assert!((label_radius(&p).unwrap() - 0.2).abs() < 1e-12);
        let swapped = p.permute_components(&[1, 0, 2]).unwrap();
        assert!(!labels_match(&p, &swapped, label_radius(&p)));
        assert!(labels_match(&p, &p, label_radius(&p)));
    }

    #[test]
    fn resampling_is_deterministic() {
        assert_eq!(resample_indices(50, 3, 7), resample_indices(50, 3, 7));
        assert_ne!(resample_indices(50, 3, 7), resample_indices(50, 3, 8));
    }
}
