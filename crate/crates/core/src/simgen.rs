//! Simulation designs, per-replication metrics and the Monte-Carlo driver.
//!
//! Models 1 and 2 draw AR(1)-correlated Gaussian features and labels from the
//! multinomial model. Models 3 and 4 are LDA designs: labels from a prior,
//! features from class-conditional Gaussians sharing `Σ = (ρ^{|i-j|})`, with
//! `μ_k = μ_K + Σ β_k` so the contrasts are exactly `β_k`.

use log::warn;
use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::baselines::{self, BootstrapOptions, BootstrapPenalty, SplitOptions};
use crate::debias::{self, InferenceOptions};
use crate::error::{argument, Result};
use crate::model::{self, CoefficientSet, Dataset};
use crate::rng;
use crate::solver;

/// Seed for model-parameter randomness of the LDA designs.
pub const PARAMETER_SEED: u64 = 914;

/// One-based supports of the LDA designs and the values placed on them.
const LDA_SUPPORTS: [([usize; 3], [f64; 3]); 3] = [
    ([197, 92, 152], [1.0, -1.0, 1.0]),
    ([173, 170, 191], [1.0, 1.0, -1.0]),
    ([23, 73, 148], [-1.0, 1.0, 1.0]),
];

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub model_id: u8,
    pub n: usize,
    pub p: usize,
    pub num_classes: usize,
    pub rho: f64,
    /// `(K-1) × p` true contrasts.
    pub beta_star: Array2<f64>,
    /// Class priors (LDA designs only).
    pub priors: Option<Vec<f64>>,
    /// Mean of the reference class (LDA designs only).
    pub mu_reference: Option<Array1<f64>>,
    pub param_seed: u64,
    /// Whether fits on this design estimate intercepts.
    pub fit_intercept: bool,
}

impl ModelConfig {
    pub fn new(model_id: u8, n: usize, p: usize) -> Result<Self> {
        if n == 0 {
            return argument("n must be positive");
        }
        match model_id {
            1 | 2 => {
                let k = if model_id == 1 { 3 } else { 4 };
                let need = 3 * (k - 1);
                if p < need {
                    return argument(format!("model {model_id} needs p >= {need}"));
                }
                let mut beta = Array2::zeros((k - 1, p));
                for c in 0..k - 1 {
                    for m in 3 * c..3 * c + 3 {
                        beta[[c, m]] = 1.0;
                    }
                }
                Ok(Self {
                    model_id,
                    n,
                    p,
                    num_classes: k,
                    rho: 0.9,
                    beta_star: beta,
                    priors: None,
                    mu_reference: None,
                    param_seed: PARAMETER_SEED,
                    fit_intercept: false,
                })
            }
            3 | 4 => {
                if p < 197 {
                    return argument(format!(
                        "model {model_id} places signals up to feature 197; need p >= 197"
                    ));
                }
                let (k, priors) = if model_id == 3 {
                    (3, vec![0.3, 0.3, 0.4])
                } else {
                    (4, vec![0.3, 0.2, 0.3, 0.2])
                };
                let mut beta = Array2::zeros((k - 1, p));
                for (c, (support, values)) in LDA_SUPPORTS.iter().take(k - 1).enumerate() {
                    for (&m, &v) in support.iter().zip(values) {
                        beta[[c, m - 1]] = v;
                    }
                }
                let mut prng = rng::seeded(PARAMETER_SEED);
                let mu: Array1<f64> = (0..p)
                    .map(|_| if prng.gen_bool(0.5) { 1.0 } else { -1.0 })
                    .collect();
                Ok(Self {
                    model_id,
                    n,
                    p,
                    num_classes: k,
                    rho: 0.5,
                    beta_star: beta,
                    priors: Some(priors),
                    mu_reference: Some(mu),
                    param_seed: PARAMETER_SEED,
                    fit_intercept: true,
                })
            }
            _ => argument(format!("unknown model {model_id}; expected 1..=4")),
        }
    }

    pub fn is_lda(&self) -> bool {
        self.priors.is_some()
    }

    /// Zero-based signal features of each contrast.
    pub fn signal_sets(&self) -> Vec<Vec<usize>> {
        self.beta_star
            .outer_iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .filter(|(_, v)| **v != 0.0)
                    .map(|(m, _)| m)
                    .collect()
            })
            .collect()
    }

    /// Stacked indicator of `β*_j ≠ 0`.
    pub fn signal_mask(&self) -> Vec<bool> {
        self.beta_star.iter().map(|v| *v != 0.0).collect()
    }

    /// `Σ β_k` for each contrast.
    fn sigma_times_beta(&self) -> Array2<f64> {
        let mut out = Array2::zeros(self.beta_star.raw_dim());
        for (c, row) in self.beta_star.outer_iter().enumerate() {
            for i in 0..self.p {
                out[[c, i]] = row
                    .iter()
                    .enumerate()
                    .filter(|(_, v)| **v != 0.0)
                    .map(|(j, v)| self.rho.powi((i as i64 - j as i64).unsigned_abs() as i32) * v)
                    .sum();
            }
        }
        out
    }

    /// Class means `μ_1, …, μ_K` of an LDA design (rows).
    pub fn class_means(&self) -> Option<Array2<f64>> {
        let mu_k = self.mu_reference.as_ref()?;
        let shift = self.sigma_times_beta();
        let mut means = Array2::zeros((self.num_classes, self.p));
        for c in 0..self.num_classes - 1 {
            means.row_mut(c).assign(&(mu_k + &shift.row(c)));
        }
        means.row_mut(self.num_classes - 1).assign(mu_k);
        Some(means)
    }

    /// Population intercepts of an LDA design:
    /// `c_k = log(π_k/π_K) - β_kᵀμ_K - ½ β_kᵀΣβ_k`.
    pub fn true_intercepts(&self) -> Option<Array1<f64>> {
        let priors = self.priors.as_ref()?;
        let mu_k = self.mu_reference.as_ref()?;
        let shift = self.sigma_times_beta();
        let last = priors[self.num_classes - 1];
        Some(Array1::from_iter((0..self.num_classes - 1).map(|c| {
            let b = self.beta_star.row(c);
            (priors[c] / last).ln() - b.dot(mu_k) - 0.5 * b.dot(&shift.row(c))
        })))
    }

    pub fn true_coefficients(&self) -> CoefficientSet {
        CoefficientSet::new(self.beta_star.clone(), self.true_intercepts())
            .expect("true coefficients are finite")
    }
}

fn ar_gaussian_with(n: usize, p: usize, rho: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let innov = (1.0 - rho * rho).sqrt();
    let mut x = Array2::zeros((n, p));
    for i in 0..n {
        let mut prev: f64 = rng.sample(StandardNormal);
        x[[i, 0]] = prev;
        for j in 1..p {
            let z: f64 = rng.sample(StandardNormal);
            prev = rho * prev + innov * z;
            x[[i, j]] = prev;
        }
    }
    x
}

/// Rows i.i.d. `N(0, Σ)` with `Σ_ij = ρ^{|i-j|}`, via the AR(1) recursion.
pub fn gen_ar_gaussian(n: usize, p: usize, rho: f64, seed: u64) -> Result<Array2<f64>> {
    if !(rho.abs() < 1.0) {
        return argument(format!("need |rho| < 1, got {rho}"));
    }
    if p == 0 {
        return argument("p must be positive");
    }
    Ok(ar_gaussian_with(n, p, rho, &mut rng::seeded(seed)))
}

fn sample_categorical(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (k, &pk) in probs.iter().enumerate() {
        acc += pk;
        if u < acc {
            return k;
        }
    }
    // rounding left u above the total: take the last class with mass
    probs.iter().rposition(|&pk| pk > 0.0).unwrap_or(probs.len() - 1)
}

fn labels_with(x: &Array2<f64>, beta: &CoefficientSet, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let probs = model::probability_matrix(x.view(), beta);
    probs
        .outer_iter()
        .map(|row| sample_categorical(row.as_slice().unwrap(), rng) + 1)
        .collect()
}

/// Labels drawn from the multinomial model at `beta_star`.
pub fn gen_labels_from_model(
    x: &Array2<f64>,
    beta_star: &CoefficientSet,
    seed: u64,
) -> Result<Vec<usize>> {
    if x.ncols() != beta_star.p() {
        return argument("feature matrix and coefficients disagree on p");
    }
    Ok(labels_with(x, beta_star, &mut rng::seeded(seed)))
}

/// Draws an LDA dataset (Models 3 and 4).
pub fn gen_lda(config: &ModelConfig, seed: u64) -> Result<Dataset> {
    let (Some(priors), Some(means)) = (config.priors.as_ref(), config.class_means()) else {
        return argument(format!("model {} is not an LDA design", config.model_id));
    };
    let mut rng = rng::seeded(seed);
    let labels: Vec<usize> = (0..config.n)
        .map(|_| sample_categorical(priors, &mut rng) + 1)
        .collect();
    let mut x = ar_gaussian_with(config.n, config.p, config.rho, &mut rng);
    for (i, &y) in labels.iter().enumerate() {
        let mut row = x.row_mut(i);
        row += &means.row(y - 1);
    }
    Dataset::new(x, labels, config.num_classes)
}

/// Draws one dataset from `config`.
pub fn generate(config: &ModelConfig, seed: u64) -> Result<Dataset> {
    if config.is_lda() {
        return gen_lda(config, seed);
    }
    let mut rng = rng::seeded(seed);
    let x = ar_gaussian_with(config.n, config.p, config.rho, &mut rng);
    let beta = config.true_coefficients();
    let labels = labels_with(&x, &beta, &mut rng);
    Dataset::new(x, labels, config.num_classes)
}

/// Inference procedure evaluated by [`run_experiment`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Debiased,
    Bootstrap,
    Multisplit,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Debiased => "debiased",
            Method::Bootstrap => "bootstrap",
            Method::Multisplit => "multisplit",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "debiased" => Ok(Method::Debiased),
            "bootstrap" => Ok(Method::Bootstrap),
            "multisplit" => Ok(Method::Multisplit),
            other => argument(format!(
                "unknown method '{other}'; expected debiased, bootstrap or multisplit"
            )),
        }
    }
}

/// Metrics of one replication. Fields a method does not produce are `None`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricSet {
    /// `Σ_k ‖β̂^{(k)} - β^{(k)*}‖²` of the cross-validated Lasso fit.
    pub sse: f64,
    pub coverage_s: Option<f64>,
    pub coverage_sc: Option<f64>,
    pub len_s: Option<f64>,
    pub len_sc: Option<f64>,
    pub type1: Option<f64>,
    pub power_individual: Option<f64>,
    pub fwer_hit: Option<bool>,
    pub power_multiple: Option<f64>,
    /// `(b̂_j - β*_j)/se_j` at the configured null coordinate (debiased only).
    pub null_statistic: Option<f64>,
}

/// Per-coordinate outcome of an inference method, used to score a replication.
#[derive(Debug, Clone, Default)]
pub struct CoordinateOutcome {
    pub interval: Option<(f64, f64)>,
    pub reject_individual: Option<bool>,
    pub reject_multiple: Option<bool>,
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, count) = values.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    (count > 0).then(|| sum / count as f64)
}

/// Scores per-coordinate outcomes against `beta_star` (stacked) with signal mask `signal`.
pub fn score_outcomes(
    outcomes: &[CoordinateOutcome],
    beta_star: &[f64],
    signal: &[bool],
    sse: f64,
) -> MetricSet {
    let on = |want: bool| {
        outcomes
            .iter()
            .zip(beta_star)
            .zip(signal)
            .filter(move |(_, s)| **s == want)
            .map(|((o, b), _)| (o, *b))
    };
    let coverage = |want| {
        mean_of(on(want).filter_map(|(o, b)| o.interval.map(|(lo, hi)| f64::from(lo <= b && b <= hi))))
    };
    let length = |want| mean_of(on(want).filter_map(|(o, _)| o.interval.map(|(lo, hi)| hi - lo)));
    let rate = |want, multiple: bool| {
        mean_of(on(want).filter_map(|(o, _)| {
            if multiple { o.reject_multiple } else { o.reject_individual }.map(f64::from)
        }))
    };
    let fwer_hit = {
        let decisions: Vec<bool> = on(false).filter_map(|(o, _)| o.reject_multiple).collect();
        (!decisions.is_empty()).then(|| decisions.iter().any(|r| *r))
    };
    MetricSet {
        sse,
        coverage_s: coverage(true),
        coverage_sc: coverage(false),
        len_s: length(true),
        len_sc: length(false),
        type1: rate(false, false),
        power_individual: rate(true, false),
        fwer_hit,
        power_multiple: rate(true, true),
        null_statistic: None,
    }
}

/// Mean and sample standard deviation over replications.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    /// `n-1` denominator; 0 for a single replication.
    pub sd: f64,
    pub count: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Self {
            mean,
            sd,
            count: values.len(),
        })
    }
}

impl std::fmt::Display for Summary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.3} ({:.3})", self.mean, self.sd)
    }
}

#[derive(Debug, Clone)]
pub struct SimulationReport {
    pub model_id: u8,
    pub n: usize,
    pub p: usize,
    pub method: Method,
    pub alpha: f64,
    pub base_seed: u64,
    pub n_reps: usize,
    /// Replications that failed and were left out of every summary.
    pub n_failed: usize,
    /// Metrics of the successful replications in replication order.
    pub replications: Vec<MetricSet>,
}

impl SimulationReport {
    fn collect(&self, f: impl Fn(&MetricSet) -> Option<f64>) -> Option<Summary> {
        Summary::of(&self.replications.iter().filter_map(f).collect::<Vec<_>>())
    }

    /// Named "mean (sd)" summaries of every metric the method produces.
    pub fn summaries(&self) -> Vec<(&'static str, Summary)> {
        let rows: [(&'static str, Option<Summary>); 10] = [
            ("sse", self.collect(|m| Some(m.sse))),
            ("coverage_s", self.collect(|m| m.coverage_s)),
            ("coverage_sc", self.collect(|m| m.coverage_sc)),
            ("len_s", self.collect(|m| m.len_s)),
            ("len_sc", self.collect(|m| m.len_sc)),
            ("type1", self.collect(|m| m.type1)),
            ("power_individual", self.collect(|m| m.power_individual)),
            ("fwer", self.collect(|m| m.fwer_hit.map(f64::from))),
            ("power_multiple", self.collect(|m| m.power_multiple)),
            ("null_statistic", self.collect(|m| m.null_statistic)),
        ];
        rows.into_iter().filter_map(|(k, s)| s.map(|s| (k, s))).collect()
    }

    pub fn summary(&self, metric: &str) -> Option<Summary> {
        self.summaries()
            .into_iter()
            .find(|(k, _)| *k == metric)
            .map(|(_, s)| s)
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOptions {
    pub inference: InferenceOptions,
    pub n_boot: usize,
    pub bootstrap_penalty: BootstrapPenalty,
    pub n_splits: usize,
    pub gamma_min: f64,
}

impl Default for ExperimentOptions {
    fn default() -> Self {
        Self {
            inference: InferenceOptions::default(),
            n_boot: 200,
            bootstrap_penalty: BootstrapPenalty::CrossValidate,
            n_splits: 200,
            gamma_min: 0.05,
        }
    }
}

impl ModelConfig {
    /// Stacked index of the null coordinate tracked for the studentized
    /// statistic: the last feature of contrast 1 outside its support.
    pub fn null_coordinate(&self) -> usize {
        (0..self.p)
            .rev()
            .find(|&m| self.beta_star[[0, m]] == 0.0)
            .expect("every design has null features")
    }
}

fn run_replication(
    config: &ModelConfig,
    method: Method,
    alpha: f64,
    seed: u64,
    opts: &ExperimentOptions,
) -> Result<MetricSet> {
    let data = generate(config, seed)?;
    data.require_all_classes()?;
    let mut solver_opts = opts.inference.solver.clone();
    solver_opts.fit_intercept = config.fit_intercept;
    let folds = opts.inference.cv_folds;
    let (_, fit) = solver::fit_cv(&data, folds, rng::derive_seed(seed, 1), &solver_opts)?;
    let truth: Vec<f64> = config.beta_star.iter().copied().collect();
    let sse: f64 = fit
        .beta
        .contrasts()
        .iter()
        .zip(&truth)
        .map(|(b, t)| (b - t).powi(2))
        .sum();
    let signal = config.signal_mask();
    let outcomes: Vec<CoordinateOutcome>;
    let mut null_statistic = None;
    match method {
        Method::Debiased => {
            let inf_opts = InferenceOptions {
                solver: solver_opts,
                ..opts.inference.clone()
            };
            let report = debias::infer_at(&data, &fit.beta, fit.lambda, rng::derive_seed(seed, 2), alpha, &inf_opts)?;
            if report.n_failed() == report.coordinates.len() {
                return Err(crate::Error::Inference("every nodewise row failed".into()));
            }
            let j = config.null_coordinate();
            let c = &report.coordinates[j];
            if let (Some(b), Some(se)) = (c.b_hat, c.se) {
                null_statistic = Some((b - truth[j]) / se);
            }
            outcomes = report
                .coordinates
                .iter()
                .map(|c| CoordinateOutcome {
                    interval: c.ci_lower.zip(c.ci_upper),
                    reject_individual: c.p_value.map(|p| p < alpha),
                    reject_multiple: c.p_adjusted.map(|p| p < alpha),
                })
                .collect();
        }
        Method::Bootstrap => {
            let boot_seed = rng::derive_seed(seed, 3);
            let result = match opts.bootstrap_penalty {
                BootstrapPenalty::CrossValidate => {
                    let b_opts = BootstrapOptions {
                        solver: solver_opts,
                        cv_folds: folds,
                        penalty: BootstrapPenalty::CrossValidate,
                    };
                    baselines::vector_bootstrap(&data, opts.n_boot, alpha, boot_seed, &b_opts)?
                }
                BootstrapPenalty::Fixed => {
                    let refit = |d: &Dataset, _| Ok(solver::fit_single(d, fit.lambda, &fit.beta, &solver_opts)?.beta);
                    baselines::vector_bootstrap_with(
                        &data,
                        opts.n_boot,
                        alpha,
                        boot_seed,
                        &|n, rng| (0..n).map(|_| rng.gen_range(0..n)).collect(),
                        &refit,
                    )?
                }
            };
            outcomes = (0..truth.len())
                .map(|j| CoordinateOutcome {
                    interval: Some((result.ci_lower[j], result.ci_upper[j])),
                    reject_individual: Some(result.reject[j]),
                    reject_multiple: None,
                })
                .collect();
        }
        Method::Multisplit => {
            let s_opts = SplitOptions {
                solver: solver_opts,
                cv_folds: folds,
                gamma_min: opts.gamma_min,
            };
            let result = baselines::multiple_splitting(&data, opts.n_splits, rng::derive_seed(seed, 4), &s_opts)?;
            outcomes = result
                .p_values
                .iter()
                .map(|p| CoordinateOutcome {
                    interval: None,
                    reject_individual: None,
                    reject_multiple: Some(*p < alpha),
                })
                .collect();
        }
    }
    let mut metrics = score_outcomes(&outcomes, &truth, &signal, sse);
    metrics.null_statistic = null_statistic;
    Ok(metrics)
}

/// Monte-Carlo evaluation of `method` on `config`. Replication `r` draws its
/// data from seed `base_seed + r`; failed replications are excluded and
/// counted, and more than 5% failures is an error.
pub fn run_experiment(
    config: &ModelConfig,
    method: Method,
    n_reps: usize,
    alpha: f64,
    base_seed: u64,
    opts: &ExperimentOptions,
) -> Result<SimulationReport> {
    if n_reps == 0 {
        return argument("need at least one replication");
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return argument(format!("alpha must lie in (0, 1), got {alpha}"));
    }
    let results: Vec<Result<MetricSet>> = (0..n_reps)
        .into_par_iter()
        .map(|r| run_replication(config, method, alpha, base_seed.wrapping_add(r as u64), opts))
        .collect();
    let mut replications = Vec::with_capacity(n_reps);
    let mut n_failed = 0;
    for (r, res) in results.into_iter().enumerate() {
        match res {
            Ok(m) => replications.push(m),
            Err(e) => {
                warn!("replication {r} failed: {e}");
                n_failed += 1;
            }
        }
    }
    if n_failed * 20 > n_reps {
        return Err(crate::Error::Data(format!(
            "{n_failed} of {n_reps} replications failed"
        )));
    }
    Ok(SimulationReport {
        model_id: config.model_id,
        n: config.n,
        p: config.p,
        method,
        alpha,
        base_seed,
        n_reps,
        n_failed,
        replications,
    })
}
