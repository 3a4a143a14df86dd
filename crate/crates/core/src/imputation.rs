//! Multiple imputation of missing outcomes under MAR.
//!
//! Given the observed part `y_r` of a row, the missing coordinates follow a
//! reweighted mixture of binomial products with weights
//! `W_k ∝ w_k(x) prod_{j in r} p_kj(y_j)`. A draw picks a component from `W`
//! and then samples each missing coordinate from its binomial.
//!
//! Row `i` of a draw made with stream `s` uses the generator `s.child(i)`, so
//! results depend only on the seed and never on execution order.

use rand::Rng;
use rayon::prelude::*;

use crate::data::{Dataset, MissingPattern, OutcomeSpec};
use crate::error::{Error, Result};
use crate::model::{self, ModelParams, ThetaLogs};
use crate::numeric;
use crate::rng::{tags, StreamSeed};

/// Conditional law of the missing coordinates of one row.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalMixture {
    weights: Vec<f64>,
    missing: Vec<usize>,
    theta: Vec<f64>,
    maxima: Vec<u32>,
}

impl ConditionalMixture {
    /// Component weights `W_{k,r}`.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Indices of the missing coordinates, ascending.
    pub fn missing_indices(&self) -> &[usize] {
        &self.missing
    }

    /// `K x d_miss` success probabilities for the missing coordinates.
    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn maxima(&self) -> &[u32] {
        &self.maxima
    }

    /// Probability of one completion of the missing coordinates.
    pub fn pmf(&self, y_miss: &[u32]) -> Result<f64> {
        let dm = self.missing.len();
        if y_miss.len() != dm {
            return Err(Error::dim("completion length differs from the missing count"));
        }
        let mut total = 0.0;
        for (k, w) in self.weights.iter().enumerate() {
            let mut lp = 0.0;
            for (j, &v) in y_miss.iter().enumerate() {
                lp += model::binomial_log_pmf(v, self.maxima[j], self.theta[k * dm + j])?;
            }
            total += w * lp.exp();
        }
        Ok(total)
    }

    /// `E[Y_j | y_r, x] = sum_k W_k N_j theta_kj` for each missing coordinate.
    pub fn expected_values(&self) -> Vec<f64> {
        let dm = self.missing.len();
        (0..dm)
            .map(|j| {
                self.weights
                    .iter()
                    .enumerate()
                    .map(|(k, w)| w * self.maxima[j] as f64 * self.theta[k * dm + j])
                    .sum()
            })
            .collect()
    }
}

fn mixture_for_row(
    params: &ModelParams,
    logs: &ThetaLogs,
    spec: &OutcomeSpec,
    x: &[f64],
    row: &[Option<u32>],
) -> ConditionalMixture {
    let k = params.n_components();
    let mut weights = vec![0.0; k];
    model::row_log_joint(params, logs, spec, x, row, &mut weights);
    numeric::softmax_in_place(&mut weights);
    let missing: Vec<usize> = (0..row.len()).filter(|&j| row[j].is_none()).collect();
    let mut theta = Vec::with_capacity(k * missing.len());
    for c in 0..k {
        let t = params.theta_row(c);
        theta.extend(missing.iter().map(|&j| t[j]));
    }
    let maxima = missing.iter().map(|&j| spec.max(j)).collect();
    ConditionalMixture {
        weights,
        missing,
        theta,
        maxima,
    }
}

/// The conditional mixture of the missing coordinates given `y_obs`, the
/// observed values listed in coordinate order.
pub fn conditional_mixture(
    x: &[f64],
    y_obs: &[u32],
    pattern: &MissingPattern,
    params: &ModelParams,
    spec: &OutcomeSpec,
) -> Result<ConditionalMixture> {
    if pattern.len() != spec.n_outcomes() || pattern.n_observed() != y_obs.len() {
        return Err(Error::dim(format!("pattern {pattern} does not match {} observed values", y_obs.len())));
    }
    if params.n_outcomes() != spec.n_outcomes() || params.n_covariates() != x.len() {
        return Err(Error::dim("model shape does not match the row"));
    }
    if pattern.is_complete() {
        return Err(Error::domain("nothing to impute: every coordinate is observed"));
    }
    let mut row = vec![None; pattern.len()];
    for (j, &v) in pattern.observed_indices().into_iter().zip(y_obs) {
        if v > spec.max(j) {
            return Err(Error::domain(format!("outcome {j} = {v} exceeds maximum {}", spec.max(j))));
        }
        row[j] = Some(v);
    }
    Ok(mixture_for_row(params, &ThetaLogs::new(params), spec, x, &row))
}

/// Cumulative binomial tables for every `(component, coordinate)`.
struct CdfTables {
    d: usize,
    tables: Vec<Vec<f64>>,
}

impl CdfTables {
    fn new(params: &ModelParams, spec: &OutcomeSpec) -> Self {
        let d = spec.n_outcomes();
        let logs = ThetaLogs::new(params);
        let mut tables = Vec::with_capacity(params.n_components() * d);
        for k in 0..params.n_components() {
            for j in 0..d {
                let n = spec.max(j);
                let mut acc = 0.0;
                let cdf: Vec<f64> = (0..=n)
                    .map(|y| {
                        acc += (spec.log_binom(j, y) + logs.kernel(k, j, y, n)).exp();
                        acc
                    })
                    .collect();
                tables.push(cdf);
            }
        }
        CdfTables { d, tables }
    }

    /// Smallest `y` with `u < F(y)` (scaled by the total to absorb rounding).
    #[inline]
    fn invert(&self, k: usize, j: usize, u: f64) -> u32 {
        let cdf = &self.tables[k * self.d + j];
        let target = u * cdf[cdf.len() - 1];
        cdf.partition_point(|&c| c <= target).min(cdf.len() - 1) as u32
    }
}

/// Inverts a discrete CDF given as cumulative weights.
#[inline]
fn pick(cumulative: &[f64], u: f64) -> usize {
    let target = u * cumulative[cumulative.len() - 1];
    cumulative.partition_point(|&c| c <= target).min(cumulative.len() - 1)
}

/// Precomputed per-row conditional weights for repeated draws from one model.
pub(crate) struct Imputer<'a> {
    data: &'a Dataset,
    rows: Vec<usize>,
    cumulative_weights: Vec<Vec<f64>>,
    cdf: CdfTables,
}

impl<'a> Imputer<'a> {
    pub(crate) fn new(data: &'a Dataset, params: &ModelParams) -> Result<Self> {
        params.check_compatible(data)?;
        let logs = ThetaLogs::new(params);
        let rows: Vec<usize> = (0..data.n_rows()).filter(|&i| !data.pattern(i).is_complete()).collect();
        let cumulative_weights = rows
            .iter()
            .map(|&i| {
                let m = mixture_for_row(params, &logs, data.spec(), data.covariate_row(i), data.outcome_row(i));
                let mut acc = 0.0;
                m.weights
                    .iter()
                    .map(|w| {
                        acc += w;
                        acc
                    })
                    .collect()
            })
            .collect();
        Ok(Imputer {
            data,
            rows,
            cumulative_weights,
            cdf: CdfTables::new(params, data.spec()),
        })
    }

    /// Completed outcomes of the incomplete rows only, row-major.
    pub(crate) fn draw_incomplete(&self, stream: &StreamSeed) -> Vec<u32> {
        let d = self.data.n_outcomes();
        let mut out = vec![0u32; self.rows.len() * d];
        out.par_chunks_mut(d.max(1))
            .zip(self.rows.par_iter().zip(self.cumulative_weights.par_iter()))
            .for_each(|(dst, (&i, cum))| {
                let mut rng = stream.child(i as u64).rng();
                let z = pick(cum, rng.random::<f64>());
                for (j, cell) in self.data.outcome_row(i).iter().enumerate() {
                    dst[j] = match cell {
                        Some(v) => *v,
                        None => self.cdf.invert(z, j, rng.random::<f64>()),
                    };
                }
            });
        out
    }

    pub(crate) fn draw_dataset(&self, stream: &StreamSeed) -> Result<Dataset> {
        let d = self.data.n_outcomes();
        let filled = self.draw_incomplete(stream);
        let mut outcomes = self.data.outcomes_flat().to_vec();
        for (slot, &i) in self.rows.iter().enumerate() {
            for j in 0..d {
                outcomes[i * d + j] = Some(filled[slot * d + j]);
            }
        }
        self.data.with_outcomes(outcomes)
    }
}

/// Completes every missing cell once; observed cells and complete rows are copied.
pub fn impute_once(data: &Dataset, params: &ModelParams, stream: &StreamSeed) -> Result<Dataset> {
    Imputer::new(data, params)?.draw_dataset(stream)
}

/// `M` completed copies of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ImputedDatasetSet {
    pub datasets: Vec<Dataset>,
    pub seed: u64,
}

impl ImputedDatasetSet {
    pub fn len(&self) -> usize {
        self.datasets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.datasets.is_empty()
    }
}

/// Stream used for copy `m` by [`impute_multiple`].
pub fn copy_stream(seed: u64, m: usize) -> StreamSeed {
    StreamSeed::new(seed).child(tags::IMPUTE).child(m as u64)
}

/// `M` independent imputations; copy `m` equals
/// `impute_once(data, params, &copy_stream(seed, m))`.
pub fn impute_multiple(data: &Dataset, params: &ModelParams, m: usize, seed: u64) -> Result<ImputedDatasetSet> {
    if m == 0 {
        return Err(Error::Config("the number of imputations must be at least 1".into()));
    }
    let imputer = Imputer::new(data, params)?;
    let datasets = (0..m)
        .map(|c| imputer.draw_dataset(&copy_stream(seed, c)))
        .collect::<Result<Vec<_>>>()?;
    Ok(ImputedDatasetSet { datasets, seed })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> ModelParams {
        ModelParams::new(2, 1, 3, vec![0.0, 0.0, 0.4, -0.8], vec![0.2, 0.7, 0.5, 0.9, 0.1, 0.3]).unwrap()
    }

    fn spec() -> OutcomeSpec {
        OutcomeSpec::new(vec![3, 4, 2]).unwrap()
    }

    #[test]
    fn all_missing_weights_are_gates() {
        let p = params();
        let pat: MissingPattern = "000".parse().unwrap();
        let m = conditional_mixture(&[0.7], &[], &pat, &p, &spec()).unwrap();
        let gates = model::gating_weights(&[0.7], &p).unwrap();
        for (a, b) in m.weights().iter().zip(&gates) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn complete_pattern_rejected() {
        let pat: MissingPattern = "111".parse().unwrap();
        assert!(conditional_mixture(&[0.7], &[1, 2, 0], &pat, &params(), &spec()).is_err());
    }

    #[test]
    fn pmf_sums_to_one() {
        let pat: MissingPattern = "010".parse().unwrap();
        let m = conditional_mixture(&[0.2], &[3], &pat, &params(), &spec()).unwrap();
        let mut total = 0.0;
        for a in 0..=3 {
            for b in 0..=2 {
                total += m.pmf(&[a, b]).unwrap();
            }
        }
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cdf_inversion_endpoints() {
        let p = params();
        let t = CdfTables::new(&p, &spec());
        assert_eq!(t.invert(0, 0, 0.0), 0);
        assert_eq!(t.invert(0, 0, 1.0 - 1e-16), 3);
    }

    #[test]
    fn complete_data_bypass_and_determinism() {
        let spec = spec();
        let data = Dataset::new(
            vec![vec![0.0], vec![1.0], vec![-0.5]],
            vec![vec![Some(1), Some(2), Some(0)], vec![None, Some(4), None], vec![Some(0), None, Some(2)]],
            spec.clone(),
        )
        .unwrap();
        let p = params();
        let a = impute_multiple(&data, &p, 3, 9).unwrap();
        let b = impute_multiple(&data, &p, 3, 9).unwrap();
        assert_eq!(a, b);
        for copy in &a.datasets {
            assert!(copy.is_complete());
            assert_eq!(copy.outcome_row(0), data.outcome_row(0));
            assert_eq!(copy.outcome_row(1)[1], Some(4));
            assert_eq!(copy.outcome_row(2)[2], Some(2));
        }
        let once = impute_once(&data, &p, &copy_stream(9, 0)).unwrap();
        assert_eq!(once, a.datasets[0]);
        let complete = Dataset::complete(vec![vec![0.0]], vec![vec![1, 1, 1]], spec).unwrap();
        assert_eq!(impute_once(&complete, &p, &StreamSeed::new(1)).unwrap(), complete);
    }
}
