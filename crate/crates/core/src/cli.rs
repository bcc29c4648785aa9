//! Command-line front end: `fit`, `infer`, `predict` and `simulate`.
//!
//! Exit codes: 0 on success, 2 for usage or data errors, 3 for numerical
//! failures. Data goes to stdout or `--output`, diagnostics to stderr.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::baselines::BootstrapPenalty;
use crate::debias::{self, CoordinateInference, InferenceOptions, NodewiseDivisor};
use crate::error::{Error, Result};
use crate::model::{self, CoefficientSet, Dataset};
use crate::simgen::{self, ExperimentOptions, Method, ModelConfig, SimulationReport};
use crate::solver::{self, SolverOptions};

#[derive(Debug, Parser)]
#[command(name = "sparsemn", version, about = "Sparse multinomial regression with debiased-Lasso inference")]
pub struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "SPARSEMN_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Cross-validated Lasso fit; writes coefficients and the CV curve as JSON lines.
    Fit(FitArgs),
    /// Debiased-Lasso confidence intervals and p-values as CSV.
    Infer(InferArgs),
    /// Class predictions and posterior probabilities from a fitted model.
    Predict(PredictArgs),
    /// Monte-Carlo study of an inference method on a simulated design.
    Simulate(SimulateArgs),
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// CSV file with a header row.
    #[arg(long)]
    pub input: PathBuf,
    /// Column holding integer class labels 1..K.
    #[arg(long, default_value = "y")]
    pub label: String,
    /// Destination file (stdout when omitted).
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Seed for the cross-validation folds.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub folds: usize,
    /// Fit on standardized features (coefficients are reported on the original scale).
    #[arg(long)]
    pub standardize: bool,
    /// Fit without class intercepts.
    #[arg(long)]
    pub no_intercept: bool,
}

impl DataArgs {
    fn solver_options(&self) -> SolverOptions {
        SolverOptions {
            fit_intercept: !self.no_intercept,
            standardize: self.standardize,
            ..SolverOptions::default()
        }
    }
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    /// Divide nodewise updates by the diagonal of the full Σ̂ instead of the sub-block.
    #[arg(long)]
    pub compat_nodewise: bool,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// CSV with the feature columns of the fitted model (a label column is optional).
    #[arg(long)]
    pub input: PathBuf,
    /// Output of `fit`.
    #[arg(long)]
    pub coefficients: PathBuf,
    #[arg(long, default_value = "y")]
    pub label: String,
    /// Destination CSV (stdout when omitted).
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MethodArg {
    Debiased,
    Bootstrap,
    Multisplit,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Debiased => Method::Debiased,
            MethodArg::Bootstrap => Method::Bootstrap,
            MethodArg::Multisplit => Method::Multisplit,
        }
    }
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Simulation design, 1 to 4.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=4))]
    pub model: u8,
    /// Sample size.
    #[arg(long)]
    pub n: usize,
    /// Number of features; models 3 and 4 need at least 197.
    #[arg(long, default_value_t = 200)]
    pub p: usize,
    /// Monte-Carlo replications.
    #[arg(long, default_value_t = 200)]
    pub reps: usize,
    #[arg(long, value_enum, default_value = "debiased")]
    pub method: MethodArg,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    /// Replication r uses data seed `seed + r`.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub folds: usize,
    /// Bootstrap resamples or random splits per replication.
    #[arg(long, default_value_t = 200)]
    pub replicates: usize,
    /// Refit bootstrap samples at the original penalty instead of re-running CV.
    #[arg(long)]
    pub fixed_penalty: bool,
    /// Divide nodewise updates by the diagonal of the full Σ̂ instead of the sub-block.
    #[arg(long)]
    pub compat_nodewise: bool,
    #[arg(long)]
    pub standardize: bool,
    /// JSON-lines destination; the summary table then goes to stdout.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(Error::Io(e)) if e.kind() == io::ErrorKind::BrokenPipe => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Inference(_) | Error::Separation(_) => 3,
        _ => 2,
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(Error::Argument("--threads must be positive".into()));
        }
        // A pool may already exist when called repeatedly in one process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    match &cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Simulate(a) => cmd_simulate(a),
    }
}

/// A CSV file split into named features and (optionally) labels.
#[derive(Debug, Clone)]
pub struct Table {
    pub feature_names: Vec<String>,
    pub features: Array2<f64>,
    pub labels: Option<Vec<usize>>,
}

fn data_error<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Data(msg.into()))
}

/// Reads a headed CSV. Every non-label column must be numeric; labels must be
/// positive integers. With `require_label` the label column must exist.
pub fn read_table(path: &Path, label: &str, require_label: bool) -> Result<Table> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let header = reader.headers()?.clone();
    let label_col = header.iter().position(|h| h == label);
    if require_label && label_col.is_none() {
        return data_error(format!("{}: no label column '{label}'", path.display()));
    }
    let feature_cols: Vec<usize> = (0..header.len()).filter(|&c| Some(c) != label_col).collect();
    if feature_cols.is_empty() {
        return data_error(format!("{}: no feature columns", path.display()));
    }
    let feature_names: Vec<String> = feature_cols.iter().map(|&c| header[c].to_string()).collect();
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| match e.position() {
            Some(pos) => Error::Data(format!("{}: line {}: {e}", path.display(), pos.line())),
            None => Error::Data(format!("{}: {e}", path.display())),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        for &c in &feature_cols {
            let field = &record[c];
            let v: f64 = field.parse().map_err(|_| {
                Error::Data(format!(
                    "{}: line {line}: column '{}': '{field}' is not a number",
                    path.display(),
                    &header[c]
                ))
            })?;
            if !v.is_finite() {
                return data_error(format!(
                    "{}: line {line}: column '{}': non-finite value",
                    path.display(),
                    &header[c]
                ));
            }
            values.push(v);
        }
        if let Some(c) = label_col {
            let field = &record[c];
            match field.parse::<usize>() {
                Ok(y) if y >= 1 => labels.push(y),
                _ => {
                    return data_error(format!(
                        "{}: line {line}: label '{field}' is not a positive integer",
                        path.display()
                    ))
                }
            }
        }
    }
    let n = values.len() / feature_cols.len();
    if n == 0 {
        return data_error(format!("{}: no data rows", path.display()));
    }
    let features = Array2::from_shape_vec((n, feature_cols.len()), values).expect("row-major fill");
    Ok(Table {
        feature_names,
        features,
        labels: label_col.map(|_| labels),
    })
}

/// Dataset with `K` = largest label; every class `1..=K` must occur.
pub fn table_dataset(table: &Table) -> Result<Dataset> {
    let labels = table.labels.clone().ok_or_else(|| Error::Data("no labels".into()))?;
    let k = labels.iter().copied().max().unwrap_or(0);
    if k < 2 {
        return data_error("need at least two classes");
    }
    let mut seen = vec![false; k];
    for &y in &labels {
        seen[y - 1] = true;
    }
    let missing: Vec<String> = (1..=k).filter(|c| !seen[c - 1]).map(|c| c.to_string()).collect();
    if !missing.is_empty() {
        return data_error(format!(
            "labels must cover 1..={k}; missing class {}",
            missing.join(", ")
        ));
    }
    Dataset::new(table.features.clone(), labels, k)
}

fn open_output(path: Option<&PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

/// Line records written by `fit` and read back by `predict`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum FitRecord {
    Model {
        num_classes: usize,
        features: Vec<String>,
        label: String,
        n: usize,
        lambda: f64,
        lambda_index: usize,
        fit_intercept: bool,
        standardize: bool,
        objective: f64,
        converged: bool,
    },
    Cv {
        index: usize,
        lambda: f64,
        mean_deviance: f64,
        se_deviance: f64,
    },
    Intercept {
        class: usize,
        value: f64,
    },
    Coefficient {
        class: usize,
        feature: String,
        value: f64,
    },
}

fn cmd_fit(a: &FitArgs) -> Result<()> {
    let table = read_table(&a.data.input, &a.data.label, true)?;
    let data = table_dataset(&table)?;
    let opts = a.data.solver_options();
    let (cv, fit) = solver::fit_cv(&data, a.data.folds, a.data.seed, &opts)?;
    let mut records = vec![FitRecord::Model {
        num_classes: data.num_classes(),
        features: table.feature_names.clone(),
        label: a.data.label.clone(),
        n: data.n(),
        lambda: fit.lambda,
        lambda_index: cv.lambda_min_index,
        fit_intercept: opts.fit_intercept,
        standardize: opts.standardize,
        objective: fit.objective,
        converged: fit.converged,
    }];
    for (i, &lambda) in cv.lambda_grid.values().iter().enumerate() {
        records.push(FitRecord::Cv {
            index: i,
            lambda,
            mean_deviance: cv.mean_cv_deviance[i],
            se_deviance: cv.se_cv_deviance[i],
        });
    }
    if let Some(b0) = fit.beta.intercepts() {
        for (k, &v) in b0.iter().enumerate() {
            records.push(FitRecord::Intercept { class: k + 1, value: v });
        }
    }
    for ((k, m), &v) in fit.beta.contrasts().indexed_iter() {
        records.push(FitRecord::Coefficient {
            class: k + 1,
            feature: table.feature_names[m].clone(),
            value: v,
        });
    }
    let mut out = open_output(a.data.output.as_ref())?;
    for r in &records {
        serde_json::to_writer(&mut out, r)?;
        writeln!(out)?;
    }
    out.flush()?;
    if a.data.output.is_some() {
        println!(
            "lambda {:.6e} (grid index {}), {} nonzero of {}, objective {:.6}",
            fit.lambda,
            cv.lambda_min_index,
            fit.beta.support_size(),
            fit.beta.contrasts().len(),
            fit.objective
        );
    }
    Ok(())
}

/// A fitted model read back from `fit` output.
#[derive(Debug, Clone)]
pub struct FittedModel {
    pub feature_names: Vec<String>,
    pub beta: CoefficientSet,
}

pub fn read_fit(path: &Path) -> Result<FittedModel> {
    let text = std::fs::read_to_string(path)?;
    let mut header = None;
    let mut intercepts = Vec::new();
    let mut coefs = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let rec: FitRecord = serde_json::from_str(line)
            .map_err(|e| Error::Data(format!("{}: line {}: {e}", path.display(), i + 1)))?;
        match rec {
            FitRecord::Model { num_classes, features, fit_intercept, .. } => {
                header = Some((num_classes, features, fit_intercept))
            }
            FitRecord::Intercept { class, value } => intercepts.push((class, value)),
            FitRecord::Coefficient { class, feature, value } => coefs.push((class, feature, value)),
            FitRecord::Cv { .. } => {}
        }
    }
    let (k, features, fit_intercept) =
        header.ok_or_else(|| Error::Data(format!("{}: no model record", path.display())))?;
    if k < 2 {
        return data_error("model needs at least two classes");
    }
    let mut contrasts = Array2::zeros((k - 1, features.len()));
    for (class, feature, value) in coefs {
        let m = features
            .iter()
            .position(|f| *f == feature)
            .ok_or_else(|| Error::Data(format!("unknown feature '{feature}'")))?;
        if class == 0 || class >= k {
            return data_error(format!("coefficient class {class} outside 1..{}", k - 1));
        }
        contrasts[[class - 1, m]] = value;
    }
    let intercepts = if fit_intercept {
        let mut b0 = Array1::zeros(k - 1);
        for (class, value) in intercepts {
            if class == 0 || class >= k {
                return data_error(format!("intercept class {class} outside 1..{}", k - 1));
            }
            b0[class - 1] = value;
        }
        Some(b0)
    } else {
        None
    };
    Ok(FittedModel {
        feature_names: features,
        beta: CoefficientSet::new(contrasts, intercepts)?,
    })
}

fn cmd_predict(a: &PredictArgs) -> Result<()> {
    let model = read_fit(&a.coefficients)?;
    let table = read_table(&a.input, &a.label, false)?;
    let cols: Vec<usize> = model
        .feature_names
        .iter()
        .map(|f| {
            table
                .feature_names
                .iter()
                .position(|g| g == f)
                .ok_or_else(|| Error::Data(format!("input lacks feature column '{f}'")))
        })
        .collect::<Result<_>>()?;
    let k = model.beta.num_classes();
    let mut out = open_output(a.output.as_ref())?;
    let mut w = csv::Writer::from_writer(&mut out);
    let mut head = vec!["row".to_string(), "predicted".to_string()];
    head.extend((1..=k).map(|c| format!("prob_{c}")));
    w.write_record(&head)?;
    let mut errors = 0usize;
    for (i, row) in table.features.rows().into_iter().enumerate() {
        let x: Array1<f64> = cols.iter().map(|&c| row[c]).collect();
        let post = model::posterior_probs(x.view(), &model.beta)?;
        let class = post.argmax() + 1;
        if let Some(labels) = &table.labels {
            errors += usize::from(labels[i] != class);
        }
        let mut rec = vec![(i + 1).to_string(), class.to_string()];
        rec.extend(post.probs.iter().map(|p| format!("{p:.16e}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    drop(w);
    out.flush()?;
    if table.labels.is_some() {
        eprintln!(
            "misclassification rate {:.4} over {} rows",
            errors as f64 / table.features.nrows() as f64,
            table.features.nrows()
        );
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| format!("{v:.16e}"))
}

/// Compact p-value for tables.
pub fn format_p(p: Option<f64>) -> String {
    match p {
        None => "NA".to_string(),
        Some(p) if p < 1e-16 => "< 1e-16".to_string(),
        Some(p) if p < 1e-4 => format!("{p:.2e}"),
        Some(p) => format!("{p:.4}"),
    }
}

pub const INFER_COLUMNS: [&str; 13] = [
    "class",
    "feature",
    "beta_hat",
    "b_hat",
    "se",
    "ci_lower",
    "ci_upper",
    "p_value",
    "p_adjusted",
    "odds_ratio",
    "lambda_j",
    "lambda",
    "failure",
];

fn infer_row(c: &CoordinateInference, names: &[String], lambda: f64) -> Vec<String> {
    vec![
        c.class.to_string(),
        names[c.feature].clone(),
        format!("{:.16e}", c.beta_hat),
        fmt_opt(c.b_hat),
        fmt_opt(c.se),
        fmt_opt(c.ci_lower),
        fmt_opt(c.ci_upper),
        fmt_opt(c.p_value),
        fmt_opt(c.p_adjusted),
        fmt_opt(c.b_hat.map(f64::exp)),
        fmt_opt(c.lambda_j),
        format!("{lambda:.16e}"),
        c.failure.clone().unwrap_or_else(|| "NA".to_string()),
    ]
}

fn cmd_infer(a: &InferArgs) -> Result<()> {
    let table = read_table(&a.data.input, &a.data.label, true)?;
    let data = table_dataset(&table)?;
    let mut opts = InferenceOptions {
        solver: a.data.solver_options(),
        cv_folds: a.data.folds,
        ..InferenceOptions::default()
    };
    if a.compat_nodewise {
        opts.nodewise.divisor = NodewiseDivisor::Literal;
    }
    let (_, _, report) = debias::infer(&data, a.data.seed, a.alpha, &opts)?;
    let mut out = open_output(a.data.output.as_ref())?;
    {
        let mut w = csv::Writer::from_writer(&mut out);
        w.write_record(INFER_COLUMNS)?;
        for c in &report.coordinates {
            w.write_record(infer_row(c, &table.feature_names, report.lambda))?;
        }
        w.flush()?;
    }
    out.flush()?;
    if a.data.output.is_some() {
        print!("{}", infer_table(&report, &table.feature_names, 10));
    }
    Ok(())
}

/// Human-readable summary of the `top` smallest p-values.
pub fn infer_table(report: &debias::InferenceReport, names: &[String], top: usize) -> String {
    let mut rows: Vec<&CoordinateInference> = report.coordinates.iter().collect();
    rows.sort_by(|a, b| {
        let pa = a.p_value.unwrap_or(f64::INFINITY);
        let pb = b.p_value.unwrap_or(f64::INFINITY);
        pa.total_cmp(&pb)
    });
    let mut s = String::new();
    let _ = writeln!(
        s,
        "lambda {:.4e}, alpha {}, {} coordinates, {} unavailable",
        report.lambda,
        report.alpha,
        report.coordinates.len(),
        report.n_failed()
    );
    let _ = writeln!(
        s,
        "{:>5}  {:<20} {:>10} {:>10} {:>12} {:>10} {:>10}",
        "class", "feature", "beta_hat", "b_hat", "odds_ratio", "p", "p_adj"
    );
    for c in rows.into_iter().take(top) {
        let num = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |v| format!("{v:.4}"));
        let _ = writeln!(
            s,
            "{:>5}  {:<20} {:>10.4} {:>10} {:>12} {:>10} {:>10}",
            c.class,
            names[c.feature],
            c.beta_hat,
            num(c.b_hat),
            c.b_hat.map_or_else(|| "NA".to_string(), |b| format!("{:.4e}", b.exp())),
            format_p(c.p_value),
            format_p(c.p_adjusted)
        );
    }
    s
}

#[derive(Debug, Serialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum SimRecord<'a> {
    Experiment {
        model: u8,
        n: usize,
        p: usize,
        method: &'a str,
        alpha: f64,
        seed: u64,
        reps: usize,
        failed: usize,
    },
    Metric {
        metric: &'a str,
        mean: f64,
        sd: f64,
        count: usize,
    },
}

/// Rendered "mean (sd)" table of a simulation report.
pub fn simulation_table(report: &SimulationReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "model {} n={} p={} method={} reps={} failed={}",
        report.model_id,
        report.n,
        report.p,
        report.method.name(),
        report.n_reps,
        report.n_failed
    );
    for (name, summary) in report.summaries() {
        let _ = writeln!(s, "{name:<18} {summary}");
    }
    s
}

fn cmd_simulate(a: &SimulateArgs) -> Result<()> {
    let config = ModelConfig::new(a.model, a.n, a.p)?;
    let mut opts = ExperimentOptions {
        n_boot: a.replicates,
        n_splits: a.replicates,
        ..ExperimentOptions::default()
    };
    opts.inference.cv_folds = a.folds;
    opts.inference.solver.standardize = a.standardize;
    if a.compat_nodewise {
        opts.inference.nodewise.divisor = NodewiseDivisor::Literal;
    }
    if a.fixed_penalty {
        opts.bootstrap_penalty = BootstrapPenalty::Fixed;
    }
    let report = simgen::run_experiment(&config, a.method.into(), a.reps, a.alpha, a.seed, &opts)?;
    let mut out = open_output(a.output.as_ref())?;
    let head = SimRecord::Experiment {
        model: report.model_id,
        n: report.n,
        p: report.p,
        method: report.method.name(),
        alpha: report.alpha,
        seed: report.base_seed,
        reps: report.n_reps,
        failed: report.n_failed,
    };
    serde_json::to_writer(&mut out, &head)?;
    writeln!(out)?;
    for (metric, s) in report.summaries() {
        let rec = SimRecord::Metric {
            metric,
            mean: s.mean,
            sd: s.sd,
            count: s.count,
        };
        serde_json::to_writer(&mut out, &rec)?;
        writeln!(out)?;
    }
    out.flush()?;
    if a.output.is_some() {
        print!("{}", simulation_table(&report));
    } else {
        eprint!("{}", simulation_table(&report));
    }
    Ok(())
}
