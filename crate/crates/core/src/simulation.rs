//! Synthetic data, MAR selection mechanisms and the replicated
//! estimation study (MSE and interval coverage).

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, MissingPattern, OutcomeSpec};
use crate::error::{Error, Result};
use crate::inference::{self, BootstrapOptions, BootstrapStatus};
use crate::mcem::{self, McemConfig};
use crate::model::{self, ModelParams};
use crate::rng::{tags, StreamSeed};

/// Gaussian covariates feeding a known mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationDgp {
    pub covariate_mean: Vec<f64>,
    /// Row-major `p x p` covariance.
    pub covariate_cov: Vec<f64>,
    pub true_params: ModelParams,
    pub spec: OutcomeSpec,
    chol: DMatrix<f64>,
}

impl SimulationDgp {
    pub fn new(covariate_mean: Vec<f64>, covariate_cov: Vec<f64>, true_params: ModelParams, spec: OutcomeSpec) -> Result<Self> {
        let p = covariate_mean.len();
        if covariate_cov.len() != p * p {
            return Err(Error::dim("covariance must be p x p"));
        }
        if true_params.n_covariates() != p || true_params.n_outcomes() != spec.n_outcomes() {
            return Err(Error::dim("parameters do not match the covariate or outcome dimensions"));
        }
        let cov = DMatrix::from_row_slice(p, p, &covariate_cov);
        if (0..p).any(|i| (0..i).any(|j| (cov[(i, j)] - cov[(j, i)]).abs() > 1e-12)) {
            return Err(Error::domain("covariance matrix is not symmetric"));
        }
        let chol = cov
            .cholesky()
            .ok_or_else(|| Error::domain("covariance matrix is not positive definite"))?
            .l();
        Ok(SimulationDgp {
            covariate_mean,
            covariate_cov,
            true_params,
            spec,
            chol,
        })
    }

    /// Three classes, two correlated Gaussian covariates and four outcomes,
    /// each with `n_trials` trials.
    pub fn benchmark(n_trials: u32) -> Result<Self> {
        let params = ModelParams::from_rows(
            &[vec![0.0, 0.0, 0.0], vec![-1.5, 0.3, 0.4], vec![-2.0, 0.5, 0.25]],
            &[vec![0.8; 4], vec![0.5; 4], vec![0.1; 4]],
        )?;
        SimulationDgp::new(
            vec![2.0, 3.0],
            vec![1.0, 0.2, 0.2, 1.0],
            params,
            OutcomeSpec::uniform(4, n_trials)?,
        )
    }

    pub fn n_covariates(&self) -> usize {
        self.covariate_mean.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedData {
    pub data: Dataset,
    /// True component of each row.
    pub labels: Vec<usize>,
}

pub fn simulate_complete(dgp: &SimulationDgp, n: usize, seed: u64) -> Result<SimulatedData> {
    if n == 0 {
        return Err(Error::domain("need at least one row"));
    }
    let p = dgp.n_covariates();
    let d = dgp.spec.n_outcomes();
    let mut rng = StreamSeed::new(seed).child(tags::SIMULATE).rng();
    let mean = DVector::from_column_slice(&dgp.covariate_mean);
    let mut x = Vec::with_capacity(n * p);
    let mut y = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let z = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let xi = &mean + &dgp.chol * z;
        let gates = model::gating_weights(xi.as_slice(), &dgp.true_params)?;
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = gates.len() - 1;
        for (c, g) in gates.iter().enumerate() {
            acc += g;
            if u < acc {
                k = c;
                break;
            }
        }
        let theta = dgp.true_params.theta_row(k);
        for j in 0..d {
            let dist = Binomial::new(dgp.spec.max(j) as u64, theta[j]).map_err(|e| Error::domain(e.to_string()))?;
            y.push(Some(dist.sample(&mut rng) as u32));
        }
        x.extend(xi.iter());
        labels.push(k);
    }
    let data = Dataset::from_flat(n, p, x, y, dgp.spec.clone())?;
    Ok(SimulatedData { data, labels })
}

/// One nonresponse pattern with logit
/// `intercept - eta + covariate_coefs . x + outcome_coefs . y`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternLogit {
    pub pattern: MissingPattern,
    pub intercept: f64,
    pub covariate_coefs: Vec<f64>,
    /// One entry per outcome; entries for coordinates missing under the
    /// pattern must be zero so the mechanism is MAR.
    pub outcome_coefs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionModel {
    pub patterns: Vec<PatternLogit>,
    /// Shifts every intercept down; `f64::INFINITY` removes all missingness.
    pub eta: f64,
}

impl SelectionModel {
    pub fn new(patterns: Vec<PatternLogit>, eta: f64) -> Result<Self> {
        if eta.is_nan() || eta < 0.0 {
            return Err(Error::domain("eta must be nonnegative"));
        }
        let Some(first) = patterns.first() else {
            return Ok(SelectionModel { patterns, eta });
        };
        let (p, d) = (first.covariate_coefs.len(), first.pattern.len());
        for pl in &patterns {
            if pl.covariate_coefs.len() != p || pl.outcome_coefs.len() != d || pl.pattern.len() != d {
                return Err(Error::dim(format!("selection pattern {} has inconsistent dimensions", pl.pattern)));
            }
            if pl.pattern.is_complete() {
                return Err(Error::domain("the complete pattern is the remainder and cannot be listed"));
            }
            if (0..d).any(|j| !pl.pattern.is_observed(j) && pl.outcome_coefs[j] != 0.0) {
                return Err(Error::domain(format!(
                    "pattern {} depends on an outcome it hides, which is not MAR",
                    pl.pattern
                )));
            }
        }
        Ok(SelectionModel { patterns, eta })
    }

    /// The four-pattern mechanism matching [`SimulationDgp::benchmark`].
    pub fn benchmark(eta: f64) -> Result<Self> {
        let pl = |bits: &str, intercept: f64, cx: [f64; 2], cy: [f64; 4]| -> Result<PatternLogit> {
            Ok(PatternLogit {
                pattern: bits.parse()?,
                intercept,
                covariate_coefs: cx.to_vec(),
                outcome_coefs: cy.to_vec(),
            })
        };
        SelectionModel::new(
            vec![
                pl("0001", -2.0, [-0.25, 0.3], [0.0, 0.0, 0.0, 0.15])?,
                pl("0110", -1.0, [0.3, -0.7], [0.0, -0.1, 0.15, 0.0])?,
                pl("1010", -2.0, [0.7, -0.4], [0.24, 0.0, -0.15, 0.0])?,
                pl("1110", -1.0, [0.2, -0.15], [0.15, -0.14, 0.05, 0.0])?,
            ],
            eta,
        )
    }

    /// Probability of each listed pattern for one complete row.
    pub fn pattern_probabilities(&self, x: &[f64], y: &[u32]) -> Vec<f64> {
        self.patterns
            .iter()
            .map(|pl| {
                if self.eta == f64::INFINITY {
                    return 0.0;
                }
                let mut eta = pl.intercept - self.eta;
                eta += pl.covariate_coefs.iter().zip(x).map(|(c, v)| c * v).sum::<f64>();
                eta += pl.outcome_coefs.iter().zip(y).map(|(c, &v)| c * v as f64).sum::<f64>();
                1.0 / (1.0 + (-eta).exp())
            })
            .collect()
    }
}

/// Masks cells of complete data by drawing one pattern per row.
pub fn apply_selection(data: &Dataset, model: &SelectionModel, seed: u64) -> Result<Dataset> {
    let d = data.n_outcomes();
    if let Some(pl) = model.patterns.first() {
        if pl.pattern.len() != d || pl.covariate_coefs.len() != data.n_covariates() {
            return Err(Error::dim("selection model does not match the data shape"));
        }
    }
    let y = data.dense_outcomes()?;
    let mut rng = StreamSeed::new(seed).child(tags::SELECTION).rng();
    let mut out = Vec::with_capacity(data.n_rows() * d);
    for i in 0..data.n_rows() {
        let yi = &y[i * d..(i + 1) * d];
        let probs = model.pattern_probabilities(data.covariate_row(i), yi);
        let total: f64 = probs.iter().sum();
        if total > 1.0 {
            return Err(Error::Validation {
                row: Some(i),
                column: None,
                message: format!("pattern probabilities sum to {total} > 1"),
            });
        }
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut chosen = None;
        for (r, pr) in probs.iter().enumerate() {
            acc += pr;
            if u < acc {
                chosen = Some(&model.patterns[r].pattern);
                break;
            }
        }
        for (j, &v) in yi.iter().enumerate() {
            out.push(match chosen {
                Some(pat) if !pat.is_observed(j) => None,
                _ => Some(v),
            });
        }
    }
    data.with_outcomes(out)
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for rest in permutations(k - 1) {
        for pos in 0..k {
            let mut p = rest.clone();
            p.insert(pos, k - 1);
            out.push(p);
        }
    }
    out
}

/// Relabels `estimate` to minimize the summed L2 distance between its theta
/// rows and those of `truth` (exhaustive over permutations, `K <= 8`).
pub fn align_components(estimate: &ModelParams, truth: &ModelParams) -> Result<ModelParams> {
    check_shape(estimate, truth)?;
    let k = truth.n_components();
    if k > 8 {
        return Err(Error::domain("alignment is exhaustive and limited to 8 components"));
    }
    let cost = |perm: &[usize]| -> f64 {
        (0..k)
            .map(|c| crate::numeric::l2_distance(estimate.theta_row(perm[c]), truth.theta_row(c)))
            .sum()
    };
    let best = permutations(k)
        .into_iter()
        .map(|p| (cost(&p), p))
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .expect("at least one permutation")
        .1;
    estimate.permute_components(&best)
}

fn check_shape(a: &ModelParams, b: &ModelParams) -> Result<()> {
    if a.n_components() != b.n_components() || a.n_covariates() != b.n_covariates() || a.n_outcomes() != b.n_outcomes() {
        return Err(Error::dim("estimate and truth differ in shape"));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MseSummary {
    pub mse_beta: f64,
    pub mse_theta: f64,
}

fn summed_errors(estimates: &[ModelParams], truth: &ModelParams, square: bool) -> Result<MseSummary> {
    if estimates.is_empty() {
        return Err(Error::domain("no estimates to evaluate"));
    }
    let mut sb = 0.0;
    let mut st = 0.0;
    for e in estimates {
        check_shape(e, truth)?;
        for k in 0..truth.n_components() {
            let t = crate::numeric::l2_distance(e.theta_row(k), truth.theta_row(k));
            st += if square { t * t } else { t };
            if k > 0 {
                let b = crate::numeric::l2_distance(e.beta_row(k), truth.beta_row(k));
                sb += if square { b * b } else { b };
            }
        }
    }
    let u = estimates.len() as f64;
    Ok(MseSummary {
        mse_beta: sb / u,
        mse_theta: st / u,
    })
}

/// Mean over replicates of `sum_k ||est_k - true_k||^2` for theta and for the
/// non-reference rows of beta. Estimates must already be aligned to `truth`.
pub fn evaluate_mse(estimates: &[ModelParams], truth: &ModelParams) -> Result<MseSummary> {
    summed_errors(estimates, truth, true)
}

/// As [`evaluate_mse`] but with unsquared norms.
pub fn evaluate_l2_error(estimates: &[ModelParams], truth: &ModelParams) -> Result<MseSummary> {
    summed_errors(estimates, truth, false)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub n_grid: Vec<usize>,
    pub eta_grid: Vec<f64>,
    pub replicates: usize,
    /// Bootstrap size per replicate; 0 skips coverage.
    pub bootstrap: usize,
    pub n_trials: u32,
    pub n_components: usize,
    pub fit: McemConfig,
    pub seed: u64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            n_grid: vec![500, 1000, 2000],
            eta_grid: vec![f64::INFINITY, 2.5, 2.0],
            replicates: 100,
            bootstrap: 0,
            n_trials: 10,
            n_components: 3,
            fit: McemConfig::default(),
            seed: 0,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {v:?} for {key}")))
}

pub(crate) fn parse_eta(v: &str) -> Result<f64> {
    match v.trim().to_ascii_lowercase().as_str() {
        "inf" | "infinity" => Ok(f64::INFINITY),
        other => parse_num("eta", other),
    }
}

impl StudyConfig {
    /// Parses `key = value` lines; `#` starts a comment. Unknown keys are errors.
    pub fn from_key_values(text: &str) -> Result<Self> {
        let mut cfg = StudyConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "n_grid" => cfg.n_grid = value.split(',').map(|v| parse_num(key, v)).collect::<Result<_>>()?,
                "eta_grid" => cfg.eta_grid = value.split(',').map(parse_eta).collect::<Result<_>>()?,
                "replicates" | "u" => cfg.replicates = parse_num(key, value)?,
                "bootstrap" | "b" => cfg.bootstrap = parse_num(key, value)?,
                "n_trials" => cfg.n_trials = parse_num(key, value)?,
                "n_components" | "k" => cfg.n_components = parse_num(key, value)?,
                "seed" => cfg.seed = parse_num(key, value)?,
                "tolerance" => cfg.fit.em.tolerance = parse_num(key, value)?,
                "max_iterations" => cfg.fit.em.max_iterations = parse_num(key, value)?,
                "inits" => cfg.fit.em.n_random_inits = parse_num(key, value)?,
                "m_imputations" => cfg.fit.n_imputations = parse_num(key, value)?,
                "max_outer_iterations" => cfg.fit.max_outer_iterations = parse_num(key, value)?,
                "ridge" => cfg.fit.em.gating.ridge = parse_num(key, value)?,
                _ => return Err(Error::Config(format!("line {}: unknown key {key:?}", lineno + 1))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_grid.is_empty() || self.eta_grid.is_empty() {
            return Err(Error::Config("study grids must be nonempty".into()));
        }
        if self.replicates == 0 {
            return Err(Error::Config("need at least one replicate".into()));
        }
        if self.bootstrap == 1 {
            return Err(Error::Config("bootstrap size must be 0 or at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub index: usize,
    pub seed: u64,
    pub complete_fraction: f64,
    pub converged: bool,
    /// Aligned free parameters, absent if the fit failed.
    pub estimate: Option<Vec<f64>>,
    /// Per free parameter: whether its interval covered the truth.
    pub covered: Option<Vec<bool>>,
    pub bootstrap_warning: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSummary {
    pub n: usize,
    pub eta: f64,
    pub replicates: usize,
    pub failed: usize,
    pub complete_fraction: f64,
    pub mse_beta: Option<f64>,
    pub mse_theta: Option<f64>,
    pub coverage_beta: Option<f64>,
    pub coverage_theta: Option<f64>,
    pub records: Vec<ReplicateRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub parameter_names: Vec<String>,
    pub truth: Vec<f64>,
    pub n_trials: u32,
    pub seed: u64,
    pub scenarios: Vec<ScenarioSummary>,
}

impl StudyReport {
    /// One line per `(n, eta)` with MSEs scaled by 100.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "n",
            "eta",
            "n_trials",
            "replicates",
            "failed",
            "complete_fraction",
            "mse_beta_x100",
            "mse_theta_x100",
            "coverage_beta",
            "coverage_theta",
        ])?;
        let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
        for s in &self.scenarios {
            w.write_record([
                s.n.to_string(),
                if s.eta.is_infinite() { "inf".into() } else { s.eta.to_string() },
                self.n_trials.to_string(),
                s.replicates.to_string(),
                s.failed.to_string(),
                s.complete_fraction.to_string(),
                opt(s.mse_beta.map(|v| 100.0 * v)),
                opt(s.mse_theta.map(|v| 100.0 * v)),
                opt(s.coverage_beta),
                opt(s.coverage_theta),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let value = serde_json::to_value(self)?;
        Ok(serde_json::to_string_pretty(&value)?)
    }
}

/// Simulates, masks, fits and (optionally) bootstraps one replicate.
fn run_replicate(
    dgp: &SimulationDgp,
    selection: &SelectionModel,
    n: usize,
    config: &StudyConfig,
    stream: StreamSeed,
    index: usize,
) -> ReplicateRecord {
    let seed = stream.derive_u64();
    let mut record = ReplicateRecord {
        index,
        seed,
        complete_fraction: f64::NAN,
        converged: false,
        estimate: None,
        covered: None,
        bootstrap_warning: false,
        error: None,
    };
    let outcome = (|| -> Result<()> {
        let sim = simulate_complete(dgp, n, stream.child(tags::SIMULATE).derive_u64())?;
        let data = apply_selection(&sim.data, selection, stream.child(tags::SELECTION).derive_u64())?;
        record.complete_fraction = data.complete_row_count() as f64 / n as f64;
        let mut fit_cfg = config.fit.clone();
        fit_cfg.em.seed = stream.child(tags::INIT).derive_u64();
        fit_cfg.em.record_trace = false;
        let fit = mcem::fit_mcem(&data, config.n_components, &fit_cfg, None)?;
        record.converged = fit.converged;
        let aligned = align_components(&fit.params, &dgp.true_params)?;
        record.estimate = Some(aligned.free_params());
        if config.bootstrap >= 2 {
            let report = inference::bootstrap_with(
                &data,
                &aligned,
                config.bootstrap,
                &fit_cfg,
                stream.child(tags::BOOTSTRAP).derive_u64(),
                &BootstrapOptions::standard(),
            )?;
            record.bootstrap_warning = report.status == BootstrapStatus::Warning;
            let truth = dgp.true_params.free_params();
            record.covered = Some((0..truth.len()).map(|i| report.covers(i, truth[i])).collect());
        }
        Ok(())
    })();
    if let Err(e) = outcome {
        record.error = Some(e.to_string());
    }
    record
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Runs every `(n, eta)` scenario of the grid. The selection model for a
/// given `eta` comes from `selection_for`.
pub fn run_study<F>(dgp: &SimulationDgp, selection_for: F, config: &StudyConfig) -> Result<StudyReport>
where
    F: Fn(f64) -> Result<SelectionModel>,
{
    config.validate()?;
    if config.n_components != dgp.true_params.n_components() {
        return Err(Error::Config("study component count differs from the generating model".into()));
    }
    let truth = &dgp.true_params;
    let names = truth.free_param_names();
    let q = truth.n_covariates() + 1;
    let n_beta = (truth.n_components() - 1) * q;
    let mut scenarios = Vec::new();
    let mut scenario_index = 0u64;
    for &n in &config.n_grid {
        for &eta in &config.eta_grid {
            let selection = selection_for(eta)?;
            let stream = StreamSeed::new(config.seed).child(tags::STUDY).child(scenario_index);
            scenario_index += 1;
            let records: Vec<ReplicateRecord> = (0..config.replicates)
                .into_par_iter()
                .map(|u| run_replicate(dgp, &selection, n, config, stream.child(u as u64), u))
                .collect();
            let estimates: Vec<ModelParams> = records
                .iter()
                .filter_map(|r| r.estimate.as_ref())
                .map(|f| ModelParams::from_free(truth.n_components(), truth.n_covariates(), truth.n_outcomes(), f))
                .collect::<Result<_>>()?;
            let mse = if estimates.is_empty() { None } else { Some(evaluate_mse(&estimates, truth)?) };
            let mut cover_beta = Vec::new();
            let mut cover_theta = Vec::new();
            for cov in records.iter().filter_map(|r| r.covered.as_ref()) {
                let frac = |s: &[bool]| s.iter().filter(|&&c| c).count() as f64 / s.len() as f64;
                if n_beta > 0 {
                    cover_beta.push(frac(&cov[..n_beta]));
                }
                cover_theta.push(frac(&cov[n_beta..]));
            }
            let fractions: Vec<f64> = records.iter().map(|r| r.complete_fraction).filter(|v| v.is_finite()).collect();
            scenarios.push(ScenarioSummary {
                n,
                eta,
                replicates: records.len(),
                failed: records.iter().filter(|r| r.estimate.is_none()).count(),
                complete_fraction: mean(&fractions).unwrap_or(f64::NAN),
                mse_beta: mse.map(|m| m.mse_beta),
                mse_theta: mse.map(|m| m.mse_theta),
                coverage_beta: mean(&cover_beta),
                coverage_theta: mean(&cover_theta),
                records,
            });
        }
    }
    Ok(StudyReport {
        parameter_names: names,
        truth: truth.free_params(),
        n_trials: config.n_trials,
        seed: config.seed,
        scenarios,
    })
}

/// Per-parameter coverage across the replicates of a scenario.
pub fn coverage_by_parameter(summary: &ScenarioSummary) -> BTreeMap<usize, f64> {
    let mut hits: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for cov in summary.records.iter().filter_map(|r| r.covered.as_ref()) {
        for (i, &c) in cov.iter().enumerate() {
            let e = hits.entry(i).or_default();
            e.0 += c as usize;
            e.1 += 1;
        }
    }
    hits.into_iter().map(|(i, (h, t))| (i, h as f64 / t as f64)).collect()
}
