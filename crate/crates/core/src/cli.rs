//! Command-line front end. Every subcommand prints a one-line JSON summary on
//! stdout; failures print `{"error": {"category", "message"}}` on stderr and
//! exit with 2 (validation), 3 (convergence) or 4 (I/O).

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use serde_json::json;

use crate::clustering::{self, Panel, StratumFilter, TrajectoryRow};
use crate::em::EmConfig;
use crate::error::{Error, Result};
use crate::gating::GatingConfig;
use crate::imputation;
use crate::inference::{self, BootstrapOptions, IntervalKind};
use crate::io::{self, DataSchema, ModelDocument, OutcomeColumn};
use crate::mcem::{self, McemConfig};
use crate::model::ModelParams;
use crate::selection::{self, Criterion};
use crate::simulation::{self, PatternLogit, SelectionModel, SimulationDgp, StudyConfig};

#[derive(Debug, Parser)]
#[command(name = "binomoe", version, about = "Mixtures of binomial experts with missing outcomes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a K-component model (Monte Carlo EM when outcomes are missing).
    Fit(FitArgs),
    /// Bootstrap standard errors and 95% intervals for a fitted model.
    Bootstrap(BootstrapArgs),
    /// Write M completed copies of the data.
    Impute(ImputeArgs),
    /// Posterior class probabilities and hard labels per row.
    Cluster(ClusterArgs),
    /// Per-subject label trajectories and a transition matrix.
    Trajectory(TrajectoryArgs),
    /// AIC/BIC over a range of K.
    Select(SelectArgs),
    /// Draw a synthetic dataset.
    Simulate(SimulateArgs),
    /// Replicated estimation study (MSE and coverage).
    Study(StudyArgs),
}

#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub schema: PathBuf,
}

#[derive(Debug, Args, Clone)]
pub struct FitOptions {
    #[arg(long, default_value_t = 10)]
    pub m_imputations: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 1000)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 100)]
    pub max_outer: usize,
    #[arg(long, default_value_t = 20)]
    pub inits: usize,
    /// Ridge penalty on the gating coefficients; guards against separation
    /// when K is larger than the data supports.
    #[arg(long, default_value_t = 0.0)]
    pub ridge: f64,
}

impl FitOptions {
    fn config(&self, seed: u64) -> McemConfig {
        McemConfig {
            em: EmConfig {
                tolerance: self.tolerance,
                max_iterations: self.max_iter,
                n_random_inits: self.inits,
                seed,
                gating: GatingConfig {
                    ridge: self.ridge,
                    ..GatingConfig::default()
                },
                ..EmConfig::default()
            },
            n_imputations: self.m_imputations,
            max_outer_iterations: self.max_outer,
            ..McemConfig::default()
        }
    }
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub input: DataArgs,
    #[arg(long)]
    pub k: usize,
    #[command(flatten)]
    pub fit: FitOptions,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "model.json")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BootstrapArgs {
    #[command(flatten)]
    pub input: DataArgs,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub b: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Percentile intervals instead of estimate ± 1.96 se.
    #[arg(long)]
    pub percentile: bool,
    #[arg(long, default_value = "report.csv")]
    pub out: PathBuf,
    /// Optional full JSON report.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ImputeArgs {
    #[command(flatten)]
    pub input: DataArgs,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub m: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "imputed")]
    pub out_prefix: String,
    /// One stacked file with a copy column instead of one file per copy.
    #[arg(long)]
    pub stacked: bool,
}

#[derive(Debug, Args)]
pub struct ClusterArgs {
    #[command(flatten)]
    pub input: DataArgs,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value = "clusters.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrajectoryArgs {
    #[command(flatten)]
    pub input: DataArgs,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub subject_col: Option<String>,
    #[arg(long)]
    pub time_col: Option<String>,
    #[arg(long)]
    pub annotation_col: Option<String>,
    #[arg(long)]
    pub from: Option<i64>,
    #[arg(long)]
    pub to: Option<i64>,
    /// Covariate filter such as `age>=70&educ==1`.
    #[arg(long)]
    pub stratify: Option<String>,
    #[arg(long, default_value = "trajectories.csv")]
    pub out: PathBuf,
    /// Defaults to `<out>_transitions.csv`.
    #[arg(long)]
    pub transitions_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    #[command(flatten)]
    pub input: DataArgs,
    #[arg(long, default_value_t = 1)]
    pub k_min: usize,
    #[arg(long, default_value_t = 6)]
    pub k_max: usize,
    #[arg(long, default_value = "bic")]
    pub criterion: Criterion,
    #[command(flatten)]
    pub fit: FitOptions,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "selection.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Three classes, two Gaussian covariates, four outcomes.
    #[value(alias = "appendix-e")]
    Benchmark,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, conflicts_with = "dgp_config")]
    pub preset: Option<Preset>,
    /// JSON file describing the generating model and selection patterns.
    #[arg(long)]
    pub dgp_config: Option<PathBuf>,
    #[arg(long)]
    pub n: usize,
    /// Missingness shift; `inf` disables missingness.
    #[arg(long, default_value = "inf", value_parser = parse_eta_arg)]
    pub eta: f64,
    /// Trials per outcome for the preset.
    #[arg(long, default_value_t = 10)]
    pub n_trials: u32,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "simulated.csv")]
    pub out: PathBuf,
    /// Defaults to `<out>.schema.json`.
    #[arg(long)]
    pub schema_out: Option<PathBuf>,
    /// Optional CSV of the true component of every row (1-based).
    #[arg(long)]
    pub labels_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StudyArgs {
    #[arg(long, value_enum, default_value = "benchmark")]
    pub preset: Preset,
    /// Key = value study config; command-line grid flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub n_grid: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',', value_parser = parse_eta_arg)]
    pub eta_grid: Option<Vec<f64>>,
    #[arg(long)]
    pub u: Option<usize>,
    #[arg(long)]
    pub b: Option<usize>,
    #[arg(long)]
    pub n_trials: Option<u32>,
    #[arg(long)]
    pub inits: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "study.csv")]
    pub out: PathBuf,
    /// Optional per-replicate JSON detail.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

fn parse_eta_arg(s: &str) -> std::result::Result<f64, String> {
    simulation::parse_eta(s).map_err(|e| e.to_string())
}

fn resolve_seed(seed: Option<u64>) -> u64 {
    seed.unwrap_or_else(rand::random)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(Error::at_path(path))?))
}

fn load_model(path: &Path, schema: &DataSchema) -> Result<(ModelDocument, ModelParams)> {
    let doc = ModelDocument::load(path)?;
    doc.check_schema(schema)?;
    let params = doc.params()?;
    Ok((doc, params))
}

fn print(value: serde_json::Value) {
    println!("{value}");
}

/// Parses arguments and runs the command; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            eprintln!("{}", json!({"error": {"category": "validation", "message": e.to_string().trim()}}));
            return 2;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", json!({"error": {"category": e.category(), "message": e.to_string()}}));
            e.exit_code()
        }
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Fit(a) => fit(a),
        Command::Bootstrap(a) => bootstrap(a),
        Command::Impute(a) => impute(a),
        Command::Cluster(a) => cluster(a),
        Command::Trajectory(a) => trajectory(a),
        Command::Select(a) => select(a),
        Command::Simulate(a) => simulate(a),
        Command::Study(a) => study(a),
    }
}

fn fit(a: FitArgs) -> Result<()> {
    let schema = DataSchema::load(&a.input.schema)?;
    let data = io::load_csv(&a.input.data, &schema)?;
    let seed = resolve_seed(a.seed);
    let config = a.fit.config(seed);
    let report = mcem::fit_mcem(&data, a.k, &config, None)?;
    let doc = ModelDocument::from_fit(&report, data.spec(), &config)?.with_names(&schema);
    doc.save(&a.out)?;
    print(json!({
        "command": "fit",
        "seed": seed,
        "K": a.k,
        "log_likelihood": report.log_likelihood,
        "converged": report.converged,
        "iterations": report.iterations,
        "failed_inits": report.failed_inits(),
        "out": a.out,
    }));
    if !report.converged {
        return Err(Error::Convergence(format!(
            "fit stopped after {} iterations without converging; best iterate written to {}",
            report.iterations,
            a.out.display()
        )));
    }
    Ok(())
}

fn stored_config(doc: &ModelDocument) -> McemConfig {
    McemConfig::deserialize(&doc.config).unwrap_or_default()
}

fn bootstrap(a: BootstrapArgs) -> Result<()> {
    let schema = DataSchema::load(&a.input.schema)?;
    let data = io::load_csv(&a.input.data, &schema)?;
    let (doc, params) = load_model(&a.model, &schema)?;
    let seed = resolve_seed(a.seed);
    let options = BootstrapOptions {
        interval: if a.percentile { IntervalKind::Percentile } else { IntervalKind::Normal },
        label_check: true,
    };
    let report = inference::bootstrap_with(&data, &params, a.b, &stored_config(&doc), seed, &options)?;
    report.write_csv(create(&a.out)?)?;
    if let Some(path) = &a.json {
        std::fs::write(path, report.to_json()?)?;
    }
    print(json!({
        "command": "bootstrap",
        "seed": seed,
        "B": a.b,
        "failed_replicates": report.failed_replicates,
        "label_switched": report.label_switched,
        "status": report.status,
        "out": a.out,
    }));
    Ok(())
}

fn impute(a: ImputeArgs) -> Result<()> {
    let schema = DataSchema::load(&a.input.schema)?;
    let data = io::load_csv(&a.input.data, &schema)?;
    let (_, params) = load_model(&a.model, &schema)?;
    let seed = resolve_seed(a.seed);
    let set = imputation::impute_multiple(&data, &params, a.m, seed)?;
    let files: Vec<PathBuf> = if a.stacked {
        let path = PathBuf::from(format!("{}.csv", a.out_prefix));
        io::write_imputations_stacked(&set, &schema, create(&path)?)?;
        vec![path]
    } else {
        io::write_imputations_separate(&set, &schema, &a.out_prefix)?
    };
    print(json!({"command": "impute", "seed": seed, "M": a.m, "files": files}));
    Ok(())
}

fn cluster(a: ClusterArgs) -> Result<()> {
    let schema = DataSchema::load(&a.input.schema)?;
    let data = io::load_csv(&a.input.data, &schema)?;
    let (_, params) = load_model(&a.model, &schema)?;
    let assignment = clustering::assign_clusters(&data, &params)?;
    assignment.write_csv(create(&a.out)?)?;
    let mut sizes = vec![0usize; params.n_components()];
    for &l in &assignment.labels {
        sizes[l] += 1;
    }
    print(json!({"command": "cluster", "rows": data.n_rows(), "cluster_sizes": sizes, "out": a.out}));
    Ok(())
}

fn trajectory(a: TrajectoryArgs) -> Result<()> {
    let mut schema = DataSchema::load(&a.input.schema)?;
    if a.subject_col.is_some() {
        schema.subject = a.subject_col.clone();
    }
    if a.time_col.is_some() {
        schema.time = a.time_col.clone();
    }
    if a.annotation_col.is_some() {
        schema.annotation = a.annotation_col.clone();
    }
    if schema.subject.is_none() || schema.time.is_none() {
        return Err(Error::Config("trajectories need subject and time columns".into()));
    }
    schema.validate()?;
    let table = io::load_table_path(&a.input.data, &schema)?;
    let (_, params) = load_model(&a.model, &schema)?;
    let panel = Panel::new(
        table.dataset,
        table.subjects.expect("subject column requested"),
        table.times.expect("time column requested"),
        table.annotations,
    )?;
    let traj = clustering::build_trajectories(&panel, &params, schema.covariates.clone())?;
    traj.write_csv(create(&a.out)?)?;
    let mut summary = json!({"command": "trajectory", "rows": traj.rows.len(), "out": a.out});
    match (a.from, a.to) {
        (Some(from), Some(to)) => {
            let filter = a
                .stratify
                .as_deref()
                .map(|e| StratumFilter::parse(e, &schema.covariates))
                .transpose()?;
            let pred = |r: &TrajectoryRow| filter.as_ref().is_none_or(|f| f.matches(r));
            let m = clustering::transition_matrix(&traj, from, to, Some(&pred))?;
            let path = a.transitions_out.clone().unwrap_or_else(|| {
                let stem = a.out.with_extension("");
                PathBuf::from(format!("{}_transitions.csv", stem.display()))
            });
            m.write_csv(create(&path)?)?;
            summary["transitions_out"] = json!(path);
            summary["subjects"] = json!(m.n_subjects);
            summary["empty_rows"] = json!(m.empty_rows);
        }
        (None, None) => {
            if a.stratify.is_some() {
                return Err(Error::Config("--stratify needs --from and --to".into()));
            }
        }
        _ => return Err(Error::Config("--from and --to must be given together".into())),
    }
    print(summary);
    Ok(())
}

fn select(a: SelectArgs) -> Result<()> {
    let schema = DataSchema::load(&a.input.schema)?;
    let data = io::load_csv(&a.input.data, &schema)?;
    let seed = resolve_seed(a.seed);
    let result = selection::select_k(&data, a.k_min..=a.k_max, a.criterion, &a.fit.config(seed))?;
    result.write_csv(create(&a.out)?)?;
    for w in &result.warnings {
        eprintln!("{}", json!({"warning": w}));
    }
    print(json!({
        "command": "select",
        "seed": seed,
        "criterion": a.criterion,
        "chosen_k": result.chosen_k,
        "argmin_aic": result.argmin(Criterion::Aic),
        "argmin_bic": result.argmin(Criterion::Bic),
        "out": a.out,
    }));
    Ok(())
}

/// JSON description of a custom generating model for `simulate --dgp-config`.
#[derive(Debug, Deserialize)]
struct DgpFile {
    covariate_mean: Vec<f64>,
    covariate_cov: Vec<Vec<f64>>,
    beta: Vec<Vec<f64>>,
    theta: Vec<Vec<f64>>,
    maxima: Vec<u32>,
    #[serde(default)]
    selection: Vec<PatternLogit>,
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let seed = resolve_seed(a.seed);
    let (dgp, selection) = match (&a.preset, &a.dgp_config) {
        (Some(Preset::Benchmark), None) => (SimulationDgp::benchmark(a.n_trials)?, SelectionModel::benchmark(a.eta)?),
        (None, Some(path)) => {
            let f: DgpFile = serde_json::from_str(&std::fs::read_to_string(path).map_err(Error::at_path(path))?)?;
            let params = ModelParams::from_rows(&f.beta, &f.theta)?;
            let dgp = SimulationDgp::new(
                f.covariate_mean,
                f.covariate_cov.concat(),
                params,
                crate::data::OutcomeSpec::new(f.maxima)?,
            )?;
            (dgp, SelectionModel::new(f.selection, a.eta)?)
        }
        _ => return Err(Error::Config("give exactly one of --preset or --dgp-config".into())),
    };
    let stream = crate::rng::StreamSeed::new(seed);
    let sim = simulation::simulate_complete(&dgp, a.n, stream.child(crate::rng::tags::SIMULATE).derive_u64())?;
    let data = simulation::apply_selection(&sim.data, &selection, stream.child(crate::rng::tags::SELECTION).derive_u64())?;
    let p = dgp.n_covariates();
    let schema = DataSchema::new(
        (1..=p).map(|c| format!("x{c}")).collect(),
        dgp.spec
            .maxima()
            .iter()
            .enumerate()
            .map(|(j, &max)| OutcomeColumn {
                name: format!("y{}", j + 1),
                max,
            })
            .collect(),
    )?;
    io::save_csv(&data, &schema, create(&a.out)?)?;
    let schema_path = a
        .schema_out
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.schema.json", a.out.with_extension("").display())));
    std::fs::write(&schema_path, schema.to_json()?)?;
    if let Some(path) = &a.labels_out {
        let mut w = csv::Writer::from_writer(create(path)?);
        w.write_record(["row", "component"])?;
        for (i, l) in sim.labels.iter().enumerate() {
            w.write_record([(i + 1).to_string(), (l + 1).to_string()])?;
        }
        w.flush()?;
    }
    print(json!({
        "command": "simulate",
        "seed": seed,
        "n": a.n,
        "eta": if a.eta.is_infinite() { json!("inf") } else { json!(a.eta) },
        "complete_fraction": data.complete_row_count() as f64 / a.n as f64,
        "out": a.out,
        "schema_out": schema_path,
    }));
    Ok(())
}

fn study(a: StudyArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(path) => StudyConfig::from_key_values(&std::fs::read_to_string(path).map_err(Error::at_path(path))?)?,
        None => StudyConfig::default(),
    };
    if let Some(v) = a.n_grid {
        cfg.n_grid = v;
    }
    if let Some(v) = a.eta_grid {
        cfg.eta_grid = v;
    }
    if let Some(v) = a.u {
        cfg.replicates = v;
    }
    if let Some(v) = a.b {
        cfg.bootstrap = v;
    }
    if let Some(v) = a.n_trials {
        cfg.n_trials = v;
    }
    if let Some(v) = a.inits {
        cfg.fit.em.n_random_inits = v;
    }
    if a.seed.is_some() || a.config.is_none() {
        cfg.seed = resolve_seed(a.seed);
    }
    cfg.validate()?;
    let Preset::Benchmark = a.preset;
    let dgp = SimulationDgp::benchmark(cfg.n_trials)?;
    let report = simulation::run_study(&dgp, SelectionModel::benchmark, &cfg)?;
    report.write_csv(create(&a.out)?)?;
    if let Some(path) = &a.json {
        std::fs::write(path, report.to_json()?)?;
    }
    print(json!({"command": "study", "seed": cfg.seed, "scenarios": report.scenarios.len(), "out": a.out}));
    Ok(())
}
