//! Posterior class membership under missingness, hard cluster labels,
//! per-subject trajectories over time and transition matrices.
//!
//! Labels are 0-based in memory and written 1-based to files.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use crate::data::{Dataset, MissingPattern, OutcomeSpec};
use crate::em::PosteriorMatrix;
use crate::error::{Error, Result};
use crate::model::{self, ModelParams, ThetaLogs};
use crate::numeric;

fn row_posterior(params: &ModelParams, logs: &ThetaLogs, spec: &OutcomeSpec, x: &[f64], row: &[Option<u32>]) -> Vec<f64> {
    let mut out = vec![0.0; params.n_components()];
    model::row_log_joint(params, logs, spec, x, row, &mut out);
    numeric::softmax_in_place(&mut out);
    out
}

/// `pi_{k,r} ∝ w_k(x) p_{k,r}(y_r)` for one row; `y_obs` lists the observed
/// values in coordinate order.
pub fn posterior_with_missing(
    x: &[f64],
    y_obs: &[u32],
    pattern: &MissingPattern,
    params: &ModelParams,
    spec: &OutcomeSpec,
) -> Result<Vec<f64>> {
    if pattern.len() != spec.n_outcomes() || pattern.n_observed() != y_obs.len() {
        return Err(Error::dim(format!("pattern {pattern} does not match {} observed values", y_obs.len())));
    }
    if params.n_outcomes() != spec.n_outcomes() || params.n_covariates() != x.len() {
        return Err(Error::dim("model shape does not match the row"));
    }
    let mut row = vec![None; pattern.len()];
    for (j, &v) in pattern.observed_indices().into_iter().zip(y_obs) {
        if v > spec.max(j) {
            return Err(Error::domain(format!("outcome {j} = {v} exceeds maximum {}", spec.max(j))));
        }
        row[j] = Some(v);
    }
    Ok(row_posterior(params, &ThetaLogs::new(params), spec, x, &row))
}

/// Posteriors for every row of `data`, any missingness allowed.
pub fn posteriors_with_missing(data: &Dataset, params: &ModelParams) -> Result<PosteriorMatrix> {
    params.check_compatible(data)?;
    let logs = ThetaLogs::new(params);
    let k = params.n_components();
    let mut values = Vec::with_capacity(data.n_rows() * k);
    for i in 0..data.n_rows() {
        values.extend(row_posterior(params, &logs, data.spec(), data.covariate_row(i), data.outcome_row(i)));
    }
    Ok(PosteriorMatrix::from_raw(values, data.n_rows(), k))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    /// 0-based argmax component per row, ties to the lowest index.
    pub labels: Vec<usize>,
    pub posteriors: PosteriorMatrix,
}

impl ClusterAssignment {
    /// `row,label,post_1..post_K` with 1-based rows and labels.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let k = self.posteriors.n_components();
        let mut header = vec!["row".to_string(), "label".to_string()];
        header.extend((1..=k).map(|c| format!("post_{c}")));
        w.write_record(&header)?;
        for (i, &label) in self.labels.iter().enumerate() {
            let mut rec = vec![(i + 1).to_string(), (label + 1).to_string()];
            rec.extend(self.posteriors.row(i).iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn assign_clusters(data: &Dataset, params: &ModelParams) -> Result<ClusterAssignment> {
    let posteriors = posteriors_with_missing(data, params)?;
    let labels = (0..posteriors.n_rows()).map(|i| numeric::argmax(posteriors.row(i))).collect();
    Ok(ClusterAssignment { labels, posteriors })
}

/// Long-format panel: one dataset row per (subject, time) visit.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    pub data: Dataset,
    pub subjects: Vec<String>,
    pub times: Vec<i64>,
    /// Free-form per-visit note carried into the trajectory table.
    pub annotations: Option<Vec<String>>,
}

impl Panel {
    /// Rejects duplicated `(subject, time)` pairs and covariates that vary
    /// within a subject.
    pub fn new(data: Dataset, subjects: Vec<String>, times: Vec<i64>, annotations: Option<Vec<String>>) -> Result<Self> {
        let n = data.n_rows();
        if subjects.len() != n || times.len() != n || annotations.as_ref().is_some_and(|a| a.len() != n) {
            return Err(Error::dim("panel columns must have one entry per data row"));
        }
        let mut seen: HashMap<(&str, i64), usize> = HashMap::new();
        let mut baseline: HashMap<&str, usize> = HashMap::new();
        for i in 0..n {
            if let Some(prev) = seen.insert((subjects[i].as_str(), times[i]), i) {
                return Err(Error::Validation {
                    row: Some(i),
                    column: None,
                    message: format!(
                        "subject {:?} at time {} already appears in row {}",
                        subjects[i],
                        times[i],
                        prev + 1
                    ),
                });
            }
            let first = *baseline.entry(subjects[i].as_str()).or_insert(i);
            if data.covariate_row(first) != data.covariate_row(i) {
                return Err(Error::Validation {
                    row: Some(i),
                    column: None,
                    message: format!("covariates of subject {:?} change over time", subjects[i]),
                });
            }
        }
        Ok(Panel {
            data,
            subjects,
            times,
            annotations,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRow {
    pub subject: String,
    pub time: i64,
    pub label: usize,
    pub posteriors: Vec<f64>,
    pub covariates: Vec<f64>,
    pub annotation: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryTable {
    pub n_components: usize,
    pub covariate_names: Vec<String>,
    pub rows: Vec<TrajectoryRow>,
}

impl TrajectoryTable {
    /// `subject,time,label,post_1..post_K[,annotation]`, rows in panel order.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let annotated = self.rows.iter().any(|r| r.annotation.is_some());
        let mut header = vec!["subject".to_string(), "time".to_string(), "label".to_string()];
        header.extend((1..=self.n_components).map(|c| format!("post_{c}")));
        if annotated {
            header.push("annotation".into());
        }
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.subject.clone(), r.time.to_string(), (r.label + 1).to_string()];
            rec.extend(r.posteriors.iter().map(f64::to_string));
            if annotated {
                rec.push(r.annotation.clone().unwrap_or_default());
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn build_trajectories(panel: &Panel, params: &ModelParams, covariate_names: Vec<String>) -> Result<TrajectoryTable> {
    if covariate_names.len() != panel.data.n_covariates() {
        return Err(Error::dim("one name per covariate is required"));
    }
    let assignment = assign_clusters(&panel.data, params)?;
    let rows = (0..panel.data.n_rows())
        .map(|i| TrajectoryRow {
            subject: panel.subjects[i].clone(),
            time: panel.times[i],
            label: assignment.labels[i],
            posteriors: assignment.posteriors.row(i).to_vec(),
            covariates: panel.data.covariate_row(i).to_vec(),
            annotation: panel.annotations.as_ref().map(|a| a[i].clone()),
        })
        .collect();
    Ok(TrajectoryTable {
        n_components: params.n_components(),
        covariate_names,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    pub n_components: usize,
    /// Row-major `K x K` counts, `from` label by `to` label.
    pub counts: Vec<u64>,
    /// Row-normalized counts; rows without any subject are uniform.
    pub probabilities: Vec<f64>,
    /// Marks the rows that had no subjects.
    pub empty_rows: Vec<bool>,
    pub n_subjects: u64,
}

impl TransitionMatrix {
    pub fn probability(&self, from: usize, to: usize) -> f64 {
        self.probabilities[from * self.n_components + to]
    }

    pub fn count(&self, from: usize, to: usize) -> u64 {
        self.counts[from * self.n_components + to]
    }

    /// `from,to,count,probability,empty_row` with 1-based labels.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["from", "to", "count", "probability", "empty_row"])?;
        let k = self.n_components;
        for a in 0..k {
            for b in 0..k {
                w.write_record([
                    (a + 1).to_string(),
                    (b + 1).to_string(),
                    self.count(a, b).to_string(),
                    self.probability(a, b).to_string(),
                    self.empty_rows[a].to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Label transitions of subjects observed at both `from_time` and `to_time`.
/// `stratum` filters subjects by their row at `from_time`.
pub fn transition_matrix(
    traj: &TrajectoryTable,
    from_time: i64,
    to_time: i64,
    stratum: Option<&dyn Fn(&TrajectoryRow) -> bool>,
) -> Result<TransitionMatrix> {
    let k = traj.n_components;
    let mut at_from: BTreeMap<&str, &TrajectoryRow> = BTreeMap::new();
    let mut at_to: HashMap<&str, usize> = HashMap::new();
    for r in &traj.rows {
        if r.time == from_time {
            at_from.insert(&r.subject, r);
        }
        if r.time == to_time {
            at_to.insert(&r.subject, r.label);
        }
    }
    let mut counts = vec![0u64; k * k];
    let mut n_subjects = 0;
    for (subject, row) in at_from {
        if stratum.is_some_and(|f| !f(row)) {
            continue;
        }
        if let Some(&to) = at_to.get(subject) {
            counts[row.label * k + to] += 1;
            n_subjects += 1;
        }
    }
    if n_subjects == 0 {
        return Err(Error::domain(format!(
            "no subjects in the stratum are observed at both times {from_time} and {to_time}"
        )));
    }
    let mut probabilities = vec![0.0; k * k];
    let mut empty_rows = vec![false; k];
    for a in 0..k {
        let total: u64 = counts[a * k..(a + 1) * k].iter().sum();
        for b in 0..k {
            probabilities[a * k + b] = if total == 0 {
                1.0 / k as f64
            } else {
                counts[a * k + b] as f64 / total as f64
            };
        }
        empty_rows[a] = total == 0;
    }
    Ok(TransitionMatrix {
        n_components: k,
        counts,
        probabilities,
        empty_rows,
        n_subjects,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum CompareOp {
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
    Ne,
}

/// Conjunction of covariate comparisons such as `age>=70&educ==1`.
#[derive(Debug, Clone, PartialEq)]
pub struct StratumFilter {
    terms: Vec<(usize, CompareOp, f64)>,
}

impl StratumFilter {
    pub fn parse(expr: &str, covariate_names: &[String]) -> Result<Self> {
        let mut terms = Vec::new();
        for raw in expr.split('&') {
            let term = raw.trim();
            let ops = [
                ("<=", CompareOp::Le),
                (">=", CompareOp::Ge),
                ("==", CompareOp::Eq),
                ("!=", CompareOp::Ne),
                ("<", CompareOp::Lt),
                (">", CompareOp::Gt),
                ("=", CompareOp::Eq),
            ];
            let (pos, sym, op) = ops
                .iter()
                .filter_map(|(s, op)| term.find(s).map(|p| (p, *s, *op)))
                .min_by_key(|(p, s, _)| (*p, std::cmp::Reverse(s.len())))
                .ok_or_else(|| Error::Config(format!("no comparison operator in stratum term {term:?}")))?;
            let name = term[..pos].trim();
            let value: f64 = term[pos + sym.len()..]
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("non-numeric value in stratum term {term:?}")))?;
            let column = covariate_names
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| Error::Config(format!("unknown covariate {name:?} in stratum")))?;
            terms.push((column, op, value));
        }
        Ok(StratumFilter { terms })
    }

    pub fn matches(&self, row: &TrajectoryRow) -> bool {
        self.terms.iter().all(|&(c, op, v)| {
            let x = row.covariates[c];
            match op {
                CompareOp::Lt => x < v,
                CompareOp::Le => x <= v,
                CompareOp::Gt => x > v,
                CompareOp::Ge => x >= v,
                CompareOp::Eq => x == v,
                CompareOp::Ne => x != v,
            }
        })
    }
}
