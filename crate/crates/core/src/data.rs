//! Outcome ceilings, missing patterns and the in-memory dataset.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// Score ceilings `N_1..N_d` together with a precomputed `log C(N_j, y)` table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<u32>", into = "Vec<u32>")]
pub struct OutcomeSpec {
    maxima: Vec<u32>,
    log_binom: Vec<Vec<f64>>,
}

impl OutcomeSpec {
    pub fn new(maxima: Vec<u32>) -> Result<Self> {
        if maxima.is_empty() {
            return Err(Error::domain("at least one outcome is required"));
        }
        if let Some(j) = maxima.iter().position(|&m| m == 0) {
            return Err(Error::domain(format!("outcome {j} has maximum 0; maxima must be >= 1")));
        }
        let log_binom = maxima
            .iter()
            .map(|&n| {
                let ln_n = ln_gamma(n as f64 + 1.0);
                (0..=n)
                    .map(|y| ln_n - ln_gamma(y as f64 + 1.0) - ln_gamma((n - y) as f64 + 1.0))
                    .collect()
            })
            .collect();
        Ok(OutcomeSpec { maxima, log_binom })
    }

    /// `d` outcomes sharing one ceiling.
    pub fn uniform(d: usize, max: u32) -> Result<Self> {
        Self::new(vec![max; d])
    }

    pub fn maxima(&self) -> &[u32] {
        &self.maxima
    }

    pub fn n_outcomes(&self) -> usize {
        self.maxima.len()
    }

    pub fn max(&self, j: usize) -> u32 {
        self.maxima[j]
    }

    /// `log C(N_j, y)`; `y` must already be within `0..=N_j`.
    #[inline]
    pub fn log_binom(&self, j: usize, y: u32) -> f64 {
        self.log_binom[j][y as usize]
    }
}

impl TryFrom<Vec<u32>> for OutcomeSpec {
    type Error = Error;

    fn try_from(v: Vec<u32>) -> Result<Self> {
        OutcomeSpec::new(v)
    }
}

impl From<OutcomeSpec> for Vec<u32> {
    fn from(s: OutcomeSpec) -> Self {
        s.maxima
    }
}

/// Which outcome coordinates of a row are observed (`true`) or missing.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct MissingPattern {
    observed: Vec<bool>,
}

impl MissingPattern {
    pub fn new(observed: Vec<bool>) -> Self {
        MissingPattern { observed }
    }

    pub fn from_row(row: &[Option<u32>]) -> Self {
        MissingPattern {
            observed: row.iter().map(Option::is_some).collect(),
        }
    }

    pub fn complete(d: usize) -> Self {
        MissingPattern { observed: vec![true; d] }
    }

    pub fn len(&self) -> usize {
        self.observed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observed.is_empty()
    }

    pub fn is_observed(&self, j: usize) -> bool {
        self.observed[j]
    }

    pub fn bits(&self) -> &[bool] {
        &self.observed
    }

    pub fn is_complete(&self) -> bool {
        self.observed.iter().all(|&b| b)
    }

    pub fn is_all_missing(&self) -> bool {
        self.observed.iter().all(|&b| !b)
    }

    pub fn observed_indices(&self) -> Vec<usize> {
        (0..self.observed.len()).filter(|&j| self.observed[j]).collect()
    }

    pub fn missing_indices(&self) -> Vec<usize> {
        (0..self.observed.len()).filter(|&j| !self.observed[j]).collect()
    }

    pub fn n_observed(&self) -> usize {
        self.observed.iter().filter(|&&b| b).count()
    }
}

impl fmt::Display for MissingPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.observed {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl FromStr for MissingPattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let observed = s
            .chars()
            .map(|c| match c {
                '1' => Ok(true),
                '0' => Ok(false),
                _ => Err(Error::domain(format!("invalid pattern character {c:?} in {s:?}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        if observed.is_empty() {
            return Err(Error::domain("empty missing pattern"));
        }
        Ok(MissingPattern { observed })
    }
}

impl TryFrom<String> for MissingPattern {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<MissingPattern> for String {
    fn from(p: MissingPattern) -> String {
        p.to_string()
    }
}

/// Covariates (`n x p`, never missing) and outcomes (`n x d`, cells may be missing).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    n_rows: usize,
    n_covariates: usize,
    covariates: Vec<f64>,
    outcomes: Vec<Option<u32>>,
    spec: OutcomeSpec,
    patterns: Vec<MissingPattern>,
}

impl Dataset {
    pub fn new(
        covariates: Vec<Vec<f64>>,
        outcomes: Vec<Vec<Option<u32>>>,
        spec: OutcomeSpec,
    ) -> Result<Self> {
        if covariates.len() != outcomes.len() {
            return Err(Error::dim(format!(
                "{} covariate rows but {} outcome rows",
                covariates.len(),
                outcomes.len()
            )));
        }
        let p = covariates.first().map_or(0, Vec::len);
        let d = spec.n_outcomes();
        let mut flat_x = Vec::with_capacity(covariates.len() * p);
        let mut flat_y = Vec::with_capacity(outcomes.len() * d);
        for (i, (x, y)) in covariates.iter().zip(&outcomes).enumerate() {
            if x.len() != p {
                return Err(Error::dim(format!("row {i}: expected {p} covariates, got {}", x.len())));
            }
            if y.len() != d {
                return Err(Error::dim(format!("row {i}: expected {d} outcomes, got {}", y.len())));
            }
            flat_x.extend_from_slice(x);
            flat_y.extend_from_slice(y);
        }
        Self::from_flat(covariates.len(), p, flat_x, flat_y, spec)
    }

    /// A dataset without missing cells.
    pub fn complete(covariates: Vec<Vec<f64>>, outcomes: Vec<Vec<u32>>, spec: OutcomeSpec) -> Result<Self> {
        let outcomes = outcomes
            .into_iter()
            .map(|r| r.into_iter().map(Some).collect())
            .collect();
        Self::new(covariates, outcomes, spec)
    }

    /// Row-major constructor.
    pub fn from_flat(
        n_rows: usize,
        n_covariates: usize,
        covariates: Vec<f64>,
        outcomes: Vec<Option<u32>>,
        spec: OutcomeSpec,
    ) -> Result<Self> {
        let d = spec.n_outcomes();
        if covariates.len() != n_rows * n_covariates || outcomes.len() != n_rows * d {
            return Err(Error::dim("flat buffers do not match the stated shape"));
        }
        for i in 0..n_rows {
            for c in 0..n_covariates {
                let v = covariates[i * n_covariates + c];
                if !v.is_finite() {
                    return Err(Error::Validation {
                        row: Some(i),
                        column: Some(format!("covariate {c}")),
                        message: "covariates must be finite and present".into(),
                    });
                }
            }
            for j in 0..d {
                if let Some(y) = outcomes[i * d + j] {
                    if y > spec.max(j) {
                        return Err(Error::Validation {
                            row: Some(i),
                            column: Some(format!("outcome {j}")),
                            message: format!("value {y} exceeds maximum {}", spec.max(j)),
                        });
                    }
                }
            }
        }
        let patterns = outcomes
            .chunks(d)
            .map(MissingPattern::from_row)
            .collect();
        Ok(Dataset {
            n_rows,
            n_covariates,
            covariates,
            outcomes,
            spec,
            patterns,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_covariates(&self) -> usize {
        self.n_covariates
    }

    pub fn n_outcomes(&self) -> usize {
        self.spec.n_outcomes()
    }

    pub fn spec(&self) -> &OutcomeSpec {
        &self.spec
    }

    pub fn covariate_row(&self, i: usize) -> &[f64] {
        &self.covariates[i * self.n_covariates..(i + 1) * self.n_covariates]
    }

    pub fn outcome_row(&self, i: usize) -> &[Option<u32>] {
        let d = self.n_outcomes();
        &self.outcomes[i * d..(i + 1) * d]
    }

    pub fn pattern(&self, i: usize) -> &MissingPattern {
        &self.patterns[i]
    }

    pub fn patterns(&self) -> &[MissingPattern] {
        &self.patterns
    }

    pub fn covariates_flat(&self) -> &[f64] {
        &self.covariates
    }

    pub fn outcomes_flat(&self) -> &[Option<u32>] {
        &self.outcomes
    }

    pub fn missing_cell_count(&self) -> usize {
        self.outcomes.iter().filter(|c| c.is_none()).count()
    }

    pub fn is_complete(&self) -> bool {
        self.outcomes.iter().all(Option::is_some)
    }

    pub fn complete_row_count(&self) -> usize {
        self.patterns.iter().filter(|p| p.is_complete()).count()
    }

    /// New dataset made of the given rows, in order (repeats allowed).
    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        let p = self.n_covariates;
        let d = self.n_outcomes();
        let mut covariates = Vec::with_capacity(rows.len() * p);
        let mut outcomes = Vec::with_capacity(rows.len() * d);
        let mut patterns = Vec::with_capacity(rows.len());
        for &i in rows {
            covariates.extend_from_slice(self.covariate_row(i));
            outcomes.extend_from_slice(self.outcome_row(i));
            patterns.push(self.patterns[i].clone());
        }
        Dataset {
            n_rows: rows.len(),
            n_covariates: p,
            covariates,
            outcomes,
            spec: self.spec.clone(),
            patterns,
        }
    }

    /// Copy of this dataset with the outcome cells replaced; covariates are shared.
    pub fn with_outcomes(&self, outcomes: Vec<Option<u32>>) -> Result<Dataset> {
        Dataset::from_flat(
            self.n_rows,
            self.n_covariates,
            self.covariates.clone(),
            outcomes,
            self.spec.clone(),
        )
    }

    /// Dense outcome matrix; errors if any cell is missing.
    pub(crate) fn dense_outcomes(&self) -> Result<Vec<u32>> {
        self.outcomes
            .iter()
            .enumerate()
            .map(|(idx, c)| {
                c.ok_or_else(|| {
                    Error::domain(format!(
                        "row {} has missing outcomes; use the observed-data routines",
                        idx / self.n_outcomes()
                    ))
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_rejects_bad_maxima() {
        assert!(OutcomeSpec::new(vec![]).is_err());
        assert!(OutcomeSpec::new(vec![3, 0]).is_err());
    }

    #[test]
    fn log_binom_table_matches_integers() {
        let s = OutcomeSpec::new(vec![5, 12]).unwrap();
        assert!((s.log_binom(0, 2) - 10f64.ln()).abs() < 1e-12);
        assert!((s.log_binom(1, 6) - 924f64.ln()).abs() < 1e-12);
        assert!(s.log_binom(1, 0).abs() < 1e-12);
    }

    #[test]
    fn pattern_roundtrip_and_indices() {
        let p: MissingPattern = "1010".parse().unwrap();
        assert_eq!(p.to_string(), "1010");
        assert_eq!(p.observed_indices(), vec![0, 2]);
        assert_eq!(p.missing_indices(), vec![1, 3]);
        assert!("10x".parse::<MissingPattern>().is_err());
    }

    #[test]
    fn patterns_derived_from_rows() {
        let spec = OutcomeSpec::uniform(3, 4).unwrap();
        let ds = Dataset::new(
            vec![vec![0.0], vec![1.0]],
            vec![vec![Some(1), None, Some(4)], vec![None, None, None]],
            spec,
        )
        .unwrap();
        assert_eq!(ds.pattern(0).to_string(), "101");
        assert!(ds.pattern(1).is_all_missing());
        assert_eq!(ds.missing_cell_count(), 4);
        assert_eq!(ds.complete_row_count(), 0);
    }

    #[test]
    fn out_of_range_outcome_is_rejected() {
        let spec = OutcomeSpec::uniform(2, 4).unwrap();
        let err = Dataset::new(vec![vec![0.0]], vec![vec![Some(5), Some(0)]], spec).unwrap_err();
        assert!(matches!(err, Error::Validation { row: Some(0), .. }));
    }

    #[test]
    fn non_finite_covariate_is_rejected() {
        let spec = OutcomeSpec::uniform(1, 4).unwrap();
        assert!(Dataset::new(vec![vec![f64::NAN]], vec![vec![Some(1)]], spec).is_err());
    }
}
