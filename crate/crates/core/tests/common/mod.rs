//! Independent reference implementations used by the integration tests.
//! Everything here works in plain probability space with direct formulas.

#![allow(dead_code)]

use binomoe::model::ModelParams;
use binomoe::simulation::SimulationDgp;
use binomoe::{Dataset, OutcomeSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub mod props;

pub fn choose(n: u32, k: u32) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

pub fn binom_pmf(y: u32, n: u32, t: f64) -> f64 {
    choose(n, y) * t.powi(y as i32) * (1.0 - t).powi((n - y) as i32)
}

/// Gates with the first row of `beta` pinned to zero.
pub fn gates(x: &[f64], beta: &[Vec<f64>]) -> Vec<f64> {
    let e: Vec<f64> = beta
        .iter()
        .map(|b| (b[0] + b[1..].iter().zip(x).map(|(c, v)| c * v).sum::<f64>()).exp())
        .collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn beta_rows(p: &ModelParams) -> Vec<Vec<f64>> {
    (0..p.n_components()).map(|k| p.beta_row(k).to_vec()).collect()
}

/// `w_k(x) prod_{observed j} pmf(y_j)`, one entry per component.
pub fn joint_terms(x: &[f64], y: &[Option<u32>], p: &ModelParams, maxima: &[u32]) -> Vec<f64> {
    let w = gates(x, &beta_rows(p));
    (0..p.n_components())
        .map(|k| {
            let th = p.theta_row(k);
            let mut v = w[k];
            for (j, yj) in y.iter().enumerate() {
                if let Some(yj) = yj {
                    v *= binom_pmf(*yj, maxima[j], th[j]);
                }
            }
            v
        })
        .collect()
}

pub fn loglik(data: &Dataset, p: &ModelParams) -> f64 {
    (0..data.n_rows())
        .map(|i| {
            joint_terms(data.covariate_row(i), data.outcome_row(i), p, data.spec().maxima())
                .iter()
                .sum::<f64>()
                .ln()
        })
        .sum()
}

pub fn posterior(x: &[f64], y: &[Option<u32>], p: &ModelParams, maxima: &[u32]) -> Vec<f64> {
    let t = joint_terms(x, y, p, maxima);
    let s: f64 = t.iter().sum();
    t.iter().map(|v| v / s).collect()
}

/// Every assignment of values to the missing coordinates of `y`, with its
/// conditional probability given the observed ones.
pub fn conditional_table(x: &[f64], y: &[Option<u32>], p: &ModelParams, maxima: &[u32]) -> Vec<(Vec<u32>, f64)> {
    let post = posterior(x, y, p, maxima);
    let missing: Vec<usize> = (0..y.len()).filter(|&j| y[j].is_none()).collect();
    let mut out = Vec::new();
    let mut vals = vec![0u32; missing.len()];
    loop {
        let mut prob = 0.0;
        for (k, pk) in post.iter().enumerate() {
            let th = p.theta_row(k);
            prob += pk * missing.iter().zip(&vals).map(|(&j, &v)| binom_pmf(v, maxima[j], th[j])).product::<f64>();
        }
        out.push((vals.clone(), prob));
        let mut pos = 0;
        loop {
            if pos == missing.len() {
                return out;
            }
            vals[pos] += 1;
            if vals[pos] <= maxima[missing[pos]] {
                break;
            }
            vals[pos] = 0;
            pos += 1;
        }
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Parameters with well separated components: theta rows spread over
/// `[0.1, 0.9]` and moderate gating slopes.
pub fn random_params(rng: &mut impl Rng, k: usize, p: usize, d: usize) -> ModelParams {
    let mut beta = vec![vec![0.0; p + 1]];
    for _ in 1..k {
        beta.push((0..=p).map(|_| rng.random_range(-1.0..1.0)).collect());
    }
    let theta: Vec<Vec<f64>> = (0..k)
        .map(|c| {
            let centre = 0.1 + 0.8 * (c as f64 + 0.5) / k as f64;
            (0..d).map(|_| (centre + rng.random_range(-0.08..0.08)).clamp(0.02, 0.98)).collect()
        })
        .collect();
    ModelParams::from_rows(&beta, &theta).unwrap()
}

/// Standard normal covariates feeding `params`.
pub fn random_dgp(params: ModelParams, max: u32) -> SimulationDgp {
    let p = params.n_covariates();
    let mut cov = vec![0.0; p * p];
    for i in 0..p {
        cov[i * p + i] = 1.0;
    }
    let spec = OutcomeSpec::uniform(params.n_outcomes(), max).unwrap();
    SimulationDgp::new(vec![0.0; p], cov, params, spec).unwrap()
}

/// Pearson statistic with cells of expected count below 5 pooled into one
/// bin (merged into the smallest regular bin if still below 5); returns
/// `(statistic, degrees of freedom)`.
pub fn pooled_chi_square(observed: &[u64], expected: &[f64]) -> (f64, usize) {
    let mut bins: Vec<(f64, f64)> = Vec::new();
    let mut pool = (0.0, 0.0);
    for (&o, &e) in observed.iter().zip(expected) {
        if e < 5.0 {
            pool.0 += o as f64;
            pool.1 += e;
        } else {
            bins.push((o as f64, e));
        }
    }
    if pool.1 >= 5.0 || bins.is_empty() {
        bins.push(pool);
    } else if pool.0 > 0.0 || pool.1 > 0.0 {
        let smallest = bins
            .iter_mut()
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("nonempty");
        smallest.0 += pool.0;
        smallest.1 += pool.1;
    }
    let stat = bins.iter().map(|(o, e)| (o - e).powi(2) / e).sum();
    (stat, bins.len().saturating_sub(1))
}
