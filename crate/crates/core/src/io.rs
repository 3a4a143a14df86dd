//! CSV ingestion with a JSON column schema, dataset export and the model
//! JSON document.
//!
//! Row numbers in ingestion errors are 1-based data rows (the header is row 0).

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, OutcomeSpec};
use crate::em::FitReport;
use crate::error::{Error, Result};
use crate::imputation::ImputedDatasetSet;
use crate::model::ModelParams;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeColumn {
    pub name: String,
    pub max: u32,
}

fn default_missing_tokens() -> Vec<String> {
    vec![String::new(), "NA".to_string()]
}

/// Column roles of a data file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataSchema {
    pub covariates: Vec<String>,
    pub outcomes: Vec<OutcomeColumn>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotation: Option<String>,
    /// Outcome cells equal to one of these (after trimming) are missing.
    #[serde(default = "default_missing_tokens")]
    pub missing_tokens: Vec<String>,
}

impl DataSchema {
    pub fn new(covariates: Vec<String>, outcomes: Vec<OutcomeColumn>) -> Result<Self> {
        let s = DataSchema {
            covariates,
            outcomes,
            subject: None,
            time: None,
            annotation: None,
            missing_tokens: default_missing_tokens(),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.outcomes.is_empty() {
            return Err(Error::Config("schema lists no outcome columns".into()));
        }
        if let Some(o) = self.outcomes.iter().find(|o| o.max == 0) {
            return Err(Error::Config(format!("outcome column {:?} needs a positive maximum", o.name)));
        }
        if self.missing_tokens.is_empty() {
            return Err(Error::Config("schema needs at least one missing-value token".into()));
        }
        let mut seen = HashSet::new();
        for name in self.column_names() {
            if !seen.insert(name) {
                return Err(Error::Config(format!("column {name:?} appears more than once in the schema")));
            }
        }
        Ok(())
    }

    fn column_names(&self) -> impl Iterator<Item = &str> {
        self.covariates
            .iter()
            .map(String::as_str)
            .chain(self.outcomes.iter().map(|o| o.name.as_str()))
            .chain(self.subject.as_deref())
            .chain(self.time.as_deref())
            .chain(self.annotation.as_deref())
    }

    pub fn spec(&self) -> Result<OutcomeSpec> {
        OutcomeSpec::new(self.outcomes.iter().map(|o| o.max).collect())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: DataSchema = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path).map_err(Error::at_path(path))?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    fn is_missing(&self, cell: &str) -> bool {
        self.missing_tokens.iter().any(|t| t == cell)
    }
}

/// A loaded file: the dataset plus any panel columns named in the schema.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedTable {
    pub dataset: Dataset,
    pub subjects: Option<Vec<String>>,
    pub times: Option<Vec<i64>>,
    pub annotations: Option<Vec<String>>,
}

pub fn load_csv(path: &Path, schema: &DataSchema) -> Result<Dataset> {
    Ok(load_table(File::open(path).map_err(Error::at_path(path))?, schema)?.dataset)
}

pub fn load_table_path(path: &Path, schema: &DataSchema) -> Result<LoadedTable> {
    load_table(BufReader::new(File::open(path).map_err(Error::at_path(path))?), schema)
}

/// Parses a headed CSV according to `schema`. Extra columns are ignored.
pub fn load_table<R: Read>(reader: R, schema: &DataSchema) -> Result<LoadedTable> {
    schema.validate()?;
    let spec = schema.spec()?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr.headers()?.clone();
    let locate = |name: &str| -> Result<usize> {
        header.iter().position(|h| h.trim() == name).ok_or_else(|| Error::Validation {
            row: Some(0),
            column: Some(name.to_string()),
            message: "column named in the schema is absent from the header".into(),
        })
    };
    let cov_idx: Vec<usize> = schema.covariates.iter().map(|c| locate(c)).collect::<Result<_>>()?;
    let out_idx: Vec<usize> = schema.outcomes.iter().map(|o| locate(&o.name)).collect::<Result<_>>()?;
    let subj_idx = schema.subject.as_deref().map(&locate).transpose()?;
    let time_idx = schema.time.as_deref().map(&locate).transpose()?;
    let note_idx = schema.annotation.as_deref().map(&locate).transpose()?;

    let (mut x, mut y) = (Vec::new(), Vec::new());
    let mut subjects = subj_idx.map(|_| Vec::new());
    let mut times = time_idx.map(|_| Vec::new());
    let mut notes = note_idx.map(|_| Vec::new());
    let mut n = 0;
    for (r, record) in rdr.records().enumerate() {
        let record = record?;
        let row = r + 1;
        let get = |i: usize, name: &str| -> Result<&str> {
            record
                .get(i)
                .map(str::trim)
                .ok_or_else(|| Error::cell(row, name, "row is shorter than the header"))
        };
        for (&i, name) in cov_idx.iter().zip(&schema.covariates) {
            let cell = get(i, name)?;
            if schema.is_missing(cell) {
                return Err(Error::cell(row, name, "covariates may not be missing"));
            }
            let v: f64 = cell
                .parse()
                .map_err(|_| Error::cell(row, name, format!("{cell:?} is not a number")))?;
            if !v.is_finite() {
                return Err(Error::cell(row, name, "covariates must be finite"));
            }
            x.push(v);
        }
        for (&i, col) in out_idx.iter().zip(&schema.outcomes) {
            let cell = get(i, &col.name)?;
            if schema.is_missing(cell) {
                y.push(None);
                continue;
            }
            let v: u32 = cell
                .parse()
                .map_err(|_| Error::cell(row, &col.name, format!("{cell:?} is not a nonnegative integer")))?;
            if v > col.max {
                return Err(Error::cell(row, &col.name, format!("value {v} exceeds the maximum {}", col.max)));
            }
            y.push(Some(v));
        }
        if let (Some(i), Some(s)) = (subj_idx, subjects.as_mut()) {
            s.push(get(i, schema.subject.as_deref().unwrap_or_default())?.to_string());
        }
        if let (Some(i), Some(t)) = (time_idx, times.as_mut()) {
            let name = schema.time.as_deref().unwrap_or_default();
            let cell = get(i, name)?;
            t.push(
                cell.parse()
                    .map_err(|_| Error::cell(row, name, format!("{cell:?} is not an integer time index")))?,
            );
        }
        if let (Some(i), Some(a)) = (note_idx, notes.as_mut()) {
            a.push(get(i, schema.annotation.as_deref().unwrap_or_default())?.to_string());
        }
        n += 1;
    }
    Ok(LoadedTable {
        dataset: Dataset::from_flat(n, schema.covariates.len(), x, y, spec)?,
        subjects,
        times,
        annotations: notes,
    })
}

fn check_schema_fits(data: &Dataset, schema: &DataSchema) -> Result<()> {
    if schema.covariates.len() != data.n_covariates() || schema.outcomes.len() != data.n_outcomes() {
        return Err(Error::dim("schema does not match the dataset shape"));
    }
    Ok(())
}

fn dataset_record(data: &Dataset, schema: &DataSchema, i: usize) -> Vec<String> {
    let missing = &schema.missing_tokens[0];
    data.covariate_row(i)
        .iter()
        .map(f64::to_string)
        .chain(
            data.outcome_row(i)
                .iter()
                .map(|c| c.map_or_else(|| missing.clone(), |v| v.to_string())),
        )
        .collect()
}

fn dataset_header(schema: &DataSchema) -> Vec<String> {
    schema
        .covariates
        .iter()
        .cloned()
        .chain(schema.outcomes.iter().map(|o| o.name.clone()))
        .collect()
}

/// Covariate then outcome columns; missing cells use the first missing token.
pub fn save_csv<W: Write>(data: &Dataset, schema: &DataSchema, out: W) -> Result<()> {
    check_schema_fits(data, schema)?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(dataset_header(schema))?;
    for i in 0..data.n_rows() {
        w.write_record(dataset_record(data, schema, i))?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_csv_path(data: &Dataset, schema: &DataSchema, path: &Path) -> Result<()> {
    save_csv(data, schema, File::create(path).map_err(Error::at_path(path))?)
}

/// One file per copy, `{prefix}_{m}.csv` with `m` starting at 1.
pub fn write_imputations_separate(set: &ImputedDatasetSet, schema: &DataSchema, prefix: &str) -> Result<Vec<PathBuf>> {
    set.datasets
        .iter()
        .enumerate()
        .map(|(m, d)| {
            let path = PathBuf::from(format!("{prefix}_{}.csv", m + 1));
            save_csv_path(d, schema, &path)?;
            Ok(path)
        })
        .collect()
}

/// All copies in one table with a leading 1-based `copy` column.
pub fn write_imputations_stacked<W: Write>(set: &ImputedDatasetSet, schema: &DataSchema, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["copy".to_string()];
    header.extend(dataset_header(schema));
    w.write_record(&header)?;
    for (m, d) in set.datasets.iter().enumerate() {
        check_schema_fits(d, schema)?;
        for i in 0..d.n_rows() {
            let mut rec = vec![(m + 1).to_string()];
            rec.extend(dataset_record(d, schema, i));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Serialized fit. Matrices are row-major with explicit dimensions; floats
/// are written in shortest round-trip form, so reloading is exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    #[serde(rename = "K")]
    pub k: usize,
    pub p: usize,
    pub d: usize,
    pub maxima: Vec<u32>,
    pub beta: Vec<f64>,
    pub theta: Vec<f64>,
    pub log_likelihood: f64,
    pub converged: bool,
    pub iterations: usize,
    pub seed: u64,
    #[serde(default)]
    pub config: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariate_names: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome_names: Option<Vec<String>>,
}

impl ModelDocument {
    pub fn from_fit<C: Serialize>(fit: &FitReport, spec: &OutcomeSpec, config: &C) -> Result<Self> {
        let p = &fit.params;
        Ok(ModelDocument {
            k: p.n_components(),
            p: p.n_covariates(),
            d: p.n_outcomes(),
            maxima: spec.maxima().to_vec(),
            beta: p.beta().to_vec(),
            theta: p.theta().to_vec(),
            log_likelihood: fit.log_likelihood,
            converged: fit.converged,
            iterations: fit.iterations,
            seed: fit.seed,
            config: serde_json::to_value(config)?,
            covariate_names: None,
            outcome_names: None,
        })
    }

    pub fn with_names(mut self, schema: &DataSchema) -> Self {
        self.covariate_names = Some(schema.covariates.clone());
        self.outcome_names = Some(schema.outcomes.iter().map(|o| o.name.clone()).collect());
        self
    }

    pub fn params(&self) -> Result<ModelParams> {
        ModelParams::new(self.k, self.p, self.d, self.beta.clone(), self.theta.clone())
    }

    pub fn spec(&self) -> Result<OutcomeSpec> {
        if self.maxima.len() != self.d {
            return Err(Error::dim("maxima length differs from d"));
        }
        OutcomeSpec::new(self.maxima.clone())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ModelDocument = serde_json::from_str(text)?;
        doc.params()?;
        doc.spec()?;
        Ok(doc)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path).map_err(Error::at_path(path))?)
    }

    /// Errors unless the model was fitted on data shaped like `schema`.
    pub fn check_schema(&self, schema: &DataSchema) -> Result<()> {
        let maxima: Vec<u32> = schema.outcomes.iter().map(|o| o.max).collect();
        if schema.covariates.len() != self.p || maxima != self.maxima {
            return Err(Error::Validation {
                row: None,
                column: None,
                message: "model dimensions or outcome maxima differ from the schema".into(),
            });
        }
        Ok(())
    }
}
