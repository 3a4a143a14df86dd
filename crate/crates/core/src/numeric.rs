//! Log-space primitives.

use crate::error::{Error, Result};

/// `log(sum(exp(values)))` with the maximum shifted out.
///
/// Entries may be `-inf`; an empty slice or one made only of `-inf`
/// (a zero total) is a domain error, as is any `NaN` or `+inf`.
pub fn log_sum_exp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::domain("log_sum_exp of an empty vector"));
    }
    if values.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(Error::domain("log_sum_exp input contains NaN or +inf"));
    }
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::domain("log_sum_exp of all -inf entries"));
    }
    Ok(lse_finite_max(values, max))
}

/// Unchecked variant for hot loops; the caller guarantees a finite maximum.
#[inline]
pub(crate) fn lse(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    lse_finite_max(values, max)
}

#[inline]
fn lse_finite_max(values: &[f64], max: f64) -> f64 {
    let s: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + s.ln()
}

/// Normalize log-weights in place into probabilities; returns the log normalizer.
#[inline]
pub(crate) fn softmax_in_place(values: &mut [f64]) -> f64 {
    let norm = lse(values);
    for v in values.iter_mut() {
        *v = (*v - norm).exp();
    }
    norm
}

/// Neumaier compensated summation.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    #[inline]
    pub(crate) fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub(crate) fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

/// Index of the largest entry, ties going to the lowest index.
pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}
