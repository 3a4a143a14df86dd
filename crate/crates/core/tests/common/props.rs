//! Property checks shared by the standalone property suite and the
//! acceptance run.

use binomoe::em::{FitReport, StopReason};
use binomoe::gating::{self, CovariateView, SoftTargetMatrix};
use binomoe::io::{self, DataSchema, ModelDocument, OutcomeColumn};
use binomoe::mcem::McemConfig;
use binomoe::model::{self, ModelParams};
use binomoe::numeric::log_sum_exp;
use binomoe::{Dataset, OutcomeSpec};
use proptest::prelude::*;
use proptest::test_runner::TestCaseError;
use rand::Rng;

pub type Check = Result<(), TestCaseError>;

pub fn params_strategy() -> impl Strategy<Value = ModelParams> {
    (1usize..5, 0usize..3, 1usize..5).prop_flat_map(|(k, p, d)| {
        let beta = prop::collection::vec(-4.0..4.0f64, (k - 1) * (p + 1));
        let theta = prop::collection::vec(0.0..=1.0f64, k * d);
        (Just((k, p, d)), beta, theta).prop_map(|((k, p, d), b, t)| {
            let mut beta = vec![0.0; p + 1];
            beta.extend(b);
            ModelParams::new(k, p, d, beta, t).unwrap()
        })
    })
}

pub fn dataset_strategy() -> impl Strategy<Value = (Dataset, Vec<u32>)> {
    (1usize..12, 0usize..3, prop::collection::vec(1u32..9, 1..5)).prop_flat_map(|(n, p, maxima)| {
        let xs = prop::collection::vec(prop::collection::vec(-1e3..1e3f64, p), n);
        let ys = maxima
            .iter()
            .map(|&m| prop::option::weighted(0.7, 0..=m))
            .collect::<Vec<_>>();
        let rows = prop::collection::vec(ys, n);
        (xs, rows, Just(maxima)).prop_map(|(xs, rows, maxima)| {
            let spec = OutcomeSpec::new(maxima.clone()).unwrap();
            (Dataset::new(xs, rows, spec).unwrap(), maxima)
        })
    })
}

pub fn schema_for(data: &Dataset, maxima: &[u32]) -> DataSchema {
    DataSchema::new(
        (0..data.n_covariates()).map(|c| format!("x{c}")).collect(),
        maxima
            .iter()
            .enumerate()
            .map(|(j, &max)| OutcomeColumn { name: format!("y{j}"), max })
            .collect(),
    )
    .unwrap()
}

pub fn gates_on_simplex(params: &ModelParams, scale: f64) -> Check {
    let x = vec![scale; params.n_covariates()];
    let w = model::gating_weights(&x, params).unwrap();
    prop_assert!(w.iter().all(|&v| (0.0..=1.0).contains(&v)));
    prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    Ok(())
}

pub fn lse_shift_invariant(v: &[f64], c: f64) -> Check {
    let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
    let a = log_sum_exp(v).unwrap() + c;
    let b = log_sum_exp(&shifted).unwrap();
    prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    Ok(())
}

/// Relative L2 error of the analytic gating gradient against central
/// differences, with the gradient norm floored at 1e-2.
pub fn gradient_error(k: usize, p: usize, seed: u64) -> f64 {
    let mut rng = super::rng(seed);
    let n = 25;
    let x: Vec<f64> = (0..n * p).map(|_| rng.random_range(-2.0..2.0)).collect();
    let targets: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
            let s: f64 = raw.iter().sum();
            raw.iter().map(|v| v / s).collect()
        })
        .collect();
    let w = SoftTargetMatrix::from_rows(&targets).unwrap();
    let view = CovariateView::new(&x, n, p).unwrap();
    let q = p + 1;
    let mut beta = vec![0.0; k * q];
    for b in beta.iter_mut().skip(q) {
        *b = rng.random_range(-1.5..1.5);
    }
    let grad = gating::weighted_logistic_gradient(&beta, view, &w).unwrap();
    assert_eq!(grad.len(), (k - 1) * q);
    let h = 1e-5;
    let f = |b: &[f64]| gating::weighted_logistic_nll(b, view, &w).unwrap();
    let fd: Vec<f64> = (q..k * q)
        .map(|idx| {
            let mut up = beta.clone();
            let mut dn = beta.clone();
            up[idx] += h;
            dn[idx] -= h;
            (f(&up) - f(&dn)) / (2.0 * h)
        })
        .collect();
    let err: f64 = grad.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = grad.iter().map(|a| a * a).sum::<f64>().sqrt();
    err / norm.max(1e-2)
}

pub fn gradient_matches_differences(k: usize, p: usize, seed: u64) -> Check {
    let e = gradient_error(k, p, seed);
    prop_assert!(e < 1e-6, "relative error {e}");
    Ok(())
}

pub fn csv_round_trip(data: &Dataset, maxima: &[u32]) -> Check {
    let schema = schema_for(data, maxima);
    let mut buf = Vec::new();
    io::save_csv(data, &schema, &mut buf).unwrap();
    let back = io::load_table(buf.as_slice(), &schema).unwrap().dataset;
    prop_assert_eq!(&back, data);
    Ok(())
}

pub fn model_json_round_trip(params: &ModelParams) -> Check {
    let spec = OutcomeSpec::uniform(params.n_outcomes(), 7).unwrap();
    let fit = FitReport {
        params: params.clone(),
        log_likelihood: -123.456_789_012_345_67,
        iterations: 3,
        converged: true,
        stop_reason: StopReason::Tolerance,
        init_log_likelihoods: vec![Some(-1.0)],
        best_init: 0,
        seed: 99,
        trace: None,
    };
    let doc = ModelDocument::from_fit(&fit, &spec, &McemConfig::default()).unwrap();
    let back = ModelDocument::from_json(&doc.to_json().unwrap()).unwrap();
    prop_assert_eq!(&back.params().unwrap(), params);
    prop_assert_eq!(&back, &doc);
    Ok(())
}
