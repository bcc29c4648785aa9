//! Competing inference procedures: percentile vector bootstrap and multiple
//! sample splitting with quantile aggregation of p-values.

use log::warn;
use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::debias::p_value_from_se;
use crate::error::{argument, Error, Result};
use crate::model::{self, CoefficientSet, Dataset};
use crate::rng;
use crate::solver::{self, SolverOptions};

/// How each bootstrap replicate chooses its penalty.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BootstrapPenalty {
    /// Cross-validate on every replicate.
    CrossValidate,
    /// Reuse the penalty chosen on the original sample and warm-start from its estimate.
    Fixed,
}

#[derive(Debug, Clone)]
pub struct BootstrapOptions {
    pub solver: SolverOptions,
    pub cv_folds: usize,
    pub penalty: BootstrapPenalty,
}

impl Default for BootstrapOptions {
    fn default() -> Self {
        Self {
            solver: SolverOptions::default(),
            cv_folds: 10,
            penalty: BootstrapPenalty::CrossValidate,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BootstrapResult {
    pub ci_lower: Vec<f64>,
    pub ci_upper: Vec<f64>,
    /// `0 ∉ [lower, upper]`.
    pub reject: Vec<bool>,
    pub n_boot: usize,
    pub n_failed: usize,
    pub seed: u64,
    /// Stacked estimates of the successful replicates, one row each.
    pub estimates: Array2<f64>,
}

/// Type-7 sample quantile of `sorted` (ascending) at `q ∈ [0, 1]`.
pub fn quantile_type7(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of an empty sample");
    let h = (sorted.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn resample_rows(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(0..n)).collect()
}

/// Percentile vector bootstrap with the Lasso refit of `opts`.
pub fn vector_bootstrap(
    data: &Dataset,
    n_boot: usize,
    alpha: f64,
    seed: u64,
    opts: &BootstrapOptions,
) -> Result<BootstrapResult> {
    data.require_all_classes()?;
    let fitter: Box<dyn Fn(&Dataset, u64) -> Result<CoefficientSet> + Sync> = match opts.penalty {
        BootstrapPenalty::CrossValidate => {
            let o = opts.clone();
            Box::new(move |d: &Dataset, s: u64| Ok(solver::fit_cv(d, o.cv_folds, s, &o.solver)?.1.beta))
        }
        BootstrapPenalty::Fixed => {
            let (_, fit) = solver::fit_cv(data, opts.cv_folds, seed, &opts.solver)?;
            let o = opts.solver.clone();
            Box::new(move |d: &Dataset, _| Ok(solver::fit_single(d, fit.lambda, &fit.beta, &o)?.beta))
        }
    };
    vector_bootstrap_with(data, n_boot, alpha, seed, &resample_rows, &*fitter)
}

/// Bootstrap driver with injectable row resampler and fitting routine. The
/// fitter receives the replicate data and a replicate-specific seed.
pub fn vector_bootstrap_with(
    data: &Dataset,
    n_boot: usize,
    alpha: f64,
    seed: u64,
    resample: &(dyn Fn(usize, &mut ChaCha8Rng) -> Vec<usize> + Sync),
    fit: &(dyn Fn(&Dataset, u64) -> Result<CoefficientSet> + Sync),
) -> Result<BootstrapResult> {
    if n_boot < 2 {
        return argument(format!("need at least 2 bootstrap replicates, got {n_boot}"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return argument(format!("alpha must lie in (0, 1), got {alpha}"));
    }
    let d = (data.num_classes() - 1) * data.p();
    let draws: Vec<Option<Array1<f64>>> = (0..n_boot)
        .into_par_iter()
        .map(|b| {
            let mut rng = rng::stream(seed, b as u64);
            for _ in 0..20 {
                let rows = resample(data.n(), &mut rng);
                let boot = data.subset(&rows);
                if boot.require_all_classes().is_err() {
                    continue;
                }
                match fit(&boot, rng::derive_seed(seed ^ 0x5bd1_e995, b as u64)) {
                    Ok(beta) => return Some(beta.stacked()),
                    Err(e) => {
                        warn!("bootstrap replicate {b} failed: {e}");
                        return None;
                    }
                }
            }
            warn!("bootstrap replicate {b} kept missing a class");
            None
        })
        .collect();
    let kept: Vec<Array1<f64>> = draws.into_iter().flatten().collect();
    let n_failed = n_boot - kept.len();
    if n_failed * 10 > n_boot {
        return Err(Error::Data(format!(
            "{n_failed} of {n_boot} bootstrap replicates failed"
        )));
    }
    let mut estimates = Array2::zeros((kept.len(), d));
    for (r, v) in kept.iter().enumerate() {
        estimates.row_mut(r).assign(v);
    }
    let mut ci_lower = Vec::with_capacity(d);
    let mut ci_upper = Vec::with_capacity(d);
    for j in 0..d {
        let mut col = estimates.column(j).to_vec();
        col.sort_by(f64::total_cmp);
        ci_lower.push(quantile_type7(&col, alpha / 2.0));
        ci_upper.push(quantile_type7(&col, 1.0 - alpha / 2.0));
    }
    let reject = ci_lower
        .iter()
        .zip(&ci_upper)
        .map(|(lo, hi)| !(*lo <= 0.0 && 0.0 <= *hi))
        .collect();
    Ok(BootstrapResult {
        ci_lower,
        ci_upper,
        reject,
        n_boot,
        n_failed,
        seed,
        estimates,
    })
}

/// Unpenalized fit on a restricted support.
#[derive(Debug, Clone)]
pub struct RestrictedFit {
    /// Full-size coefficients, zero off the support, with intercepts.
    pub beta: CoefficientSet,
    /// Free parameters in order: for each class, its intercept then its support.
    /// `None` marks an intercept.
    pub parameters: Vec<(usize, Option<usize>)>,
    /// Estimated covariance of the free parameters (inverse observed information).
    pub covariance: Array2<f64>,
    pub iterations: usize,
}

impl RestrictedFit {
    /// Standard error of contrast `(k, m)` if it is free.
    pub fn std_error(&self, k: usize, m: usize) -> Option<f64> {
        self.parameters
            .iter()
            .position(|&(c, f)| c == k && f == Some(m))
            .map(|i| self.covariance[[i, i]].max(0.0).sqrt())
    }
}

/// Bound on `n·Var(θ̂_a)` beyond which the restricted fit counts as separated.
const SEPARATION_VARIANCE: f64 = 1e6;

/// Newton's method for the multinomial MLE with intercepts and, for class
/// `k`, only the features in `support[k]`.
pub fn fit_unpenalized_restricted(data: &Dataset, support: &[Vec<usize>]) -> Result<RestrictedFit> {
    let (n, p, km1) = (data.n(), data.p(), data.num_classes() - 1);
    if support.len() != km1 {
        return argument(format!("expected {km1} support sets, got {}", support.len()));
    }
    for s in support {
        if s.iter().any(|&m| m >= p) {
            return argument("support index out of range");
        }
    }
    data.require_all_classes()?;
    let parameters: Vec<(usize, Option<usize>)> = support
        .iter()
        .enumerate()
        .flat_map(|(k, s)| std::iter::once((k, None)).chain(s.iter().map(move |&m| (k, Some(m)))))
        .collect();
    let q = parameters.len();
    if 2 * q >= n {
        return argument(format!("restricted dimension {q} is not below n/2 = {}", n / 2));
    }
    let x = data.features();
    let zval = |i: usize, f: Option<usize>| f.map_or(1.0, |m| x[[i, m]]);
    let build = |theta: &[f64]| -> CoefficientSet {
        let mut c = Array2::zeros((km1, p));
        let mut b0 = Array1::zeros(km1);
        for (&(k, f), &v) in parameters.iter().zip(theta) {
            match f {
                None => b0[k] = v,
                Some(m) => c[[k, m]] = v,
            }
        }
        CoefficientSet::new(c, Some(b0)).expect("finite Newton iterate")
    };
    let mut theta = vec![0.0; q];
    for (t, &(k, f)) in theta.iter_mut().zip(&parameters) {
        if f.is_none() {
            *t = solver::frequency_intercepts(data)[k];
        }
    }
    let nf = n as f64;
    for iter in 1..=100 {
        let beta = build(&theta);
        let probs = model::probability_matrix(x.view(), &beta);
        let mut grad = DVector::zeros(q);
        let mut hess = DMatrix::zeros(q, q);
        for i in 0..n {
            for (a, &(k, fa)) in parameters.iter().enumerate() {
                let za = zval(i, fa);
                grad[a] += (probs[[i, k]] - data.indicator(i, k)) * za / nf;
                for (b, &(l, fb)) in parameters.iter().enumerate().skip(a) {
                    let w = if k == l {
                        probs[[i, k]] * (1.0 - probs[[i, k]])
                    } else {
                        -probs[[i, k]] * probs[[i, l]]
                    };
                    hess[(a, b)] += w * za * zval(i, fb) / nf;
                }
            }
        }
        for a in 0..q {
            for b in 0..a {
                hess[(a, b)] = hess[(b, a)];
            }
        }
        let chol = hess.clone().cholesky().ok_or_else(|| {
            Error::Separation("restricted information matrix is singular".into())
        })?;
        if grad.norm() <= 1e-8 {
            let cov = chol.inverse() / nf;
            // a diverging MLE flattens the likelihood: the gradient vanishes
            // while the information collapses along the separating direction
            let worst = (0..q).map(|a| cov[(a, a)] * nf).fold(0.0, f64::max);
            if worst > SEPARATION_VARIANCE {
                return Err(Error::Separation(format!(
                    "scaled variance {worst:.3e} signals a diverging estimate"
                )));
            }
            return Ok(RestrictedFit {
                beta,
                parameters,
                covariance: Array2::from_shape_fn((q, q), |(a, b)| cov[(a, b)]),
                iterations: iter - 1,
            });
        }
        let step = chol.solve(&(-&grad));
        let before = model::avg_neg_log_likelihood(data, &beta)?;
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..50 {
            let trial: Vec<f64> = theta.iter().zip(step.iter()).map(|(a, s)| a + t * s).collect();
            if model::avg_neg_log_likelihood(data, &build(&trial))? <= before {
                theta = trial;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        let norm = theta.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e3 {
            return Err(Error::Separation(format!(
                "coefficient norm {norm:.3e} exceeds 1e3"
            )));
        }
        if !accepted {
            break;
        }
    }
    Err(Error::Inference(
        "restricted Newton iteration did not converge".into(),
    ))
}

#[derive(Debug, Clone)]
pub struct SplitOptions {
    pub solver: SolverOptions,
    pub cv_folds: usize,
    /// Lower end of the aggregation quantile range.
    pub gamma_min: f64,
}

impl Default for SplitOptions {
    fn default() -> Self {
        Self {
            solver: SolverOptions::default(),
            cv_folds: 10,
            gamma_min: 0.05,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SplitResult {
    /// Aggregated p-value of every stacked coordinate.
    pub p_values: Vec<f64>,
    pub n_splits: usize,
    /// Splits whose selection or refit failed and contributed p = 1 throughout.
    pub n_failed: usize,
    pub seed: u64,
    /// Bonferroni-scaled per-split p-values, one row per split.
    pub split_p_values: Array2<f64>,
}

/// `P = min{1, (1 - ln γ_min) · inf_{γ ∈ [γ_min, 1]} Q(γ)}` with
/// `Q(γ) = min{1, q_γ(p^{(b)}/γ)}` and `q_γ` the empirical γ-quantile
/// (inverse of the empirical distribution function).
///
/// `Q` is piecewise: on `((m-1)/B, m/B]` the quantile is the `m`-th order
/// statistic, so the infimum is attained on the grid `γ = m/B`.
pub fn aggregate_p_values(split_p: &[f64], gamma_min: f64) -> Result<f64> {
    if split_p.is_empty() {
        return argument("no split p-values to aggregate");
    }
    if !(gamma_min > 0.0 && gamma_min < 1.0) {
        return argument(format!("gamma_min must lie in (0, 1), got {gamma_min}"));
    }
    let mut sorted = split_p.to_vec();
    sorted.sort_by(f64::total_cmp);
    let b = sorted.len();
    let first = ((gamma_min * b as f64).ceil() as usize).max(1);
    let inf = (first..=b)
        .map(|m| (sorted[m - 1] * b as f64 / m as f64).min(1.0))
        .fold(f64::INFINITY, f64::min);
    Ok(((1.0 - gamma_min.ln()) * inf).min(1.0))
}

/// Bonferroni-scaled p-values of one split, or `None` if the split failed.
fn one_split(data: &Dataset, seed: u64, b: usize, opts: &SplitOptions) -> Option<Vec<f64>> {
    let (p, km1) = (data.p(), data.num_classes() - 1);
    let mut rng = rng::stream(seed, b as u64);
    let halves = solver::stratified_folds(data, 2, &mut rng);
    let (a_idx, b_idx): (Vec<usize>, Vec<usize>) = (0..data.n()).partition(|&i| halves[i] == 0);
    let (half_a, half_b) = (data.subset(&a_idx), data.subset(&b_idx));
    let selected = match solver::fit_cv(&half_a, opts.cv_folds, rng.gen::<u64>(), &opts.solver) {
        Ok((_, fit)) => fit.beta,
        Err(e) => {
            warn!("split {b}: selection failed: {e}");
            return None;
        }
    };
    let support: Vec<Vec<usize>> = (0..km1)
        .map(|k| (0..p).filter(|&m| selected.contrasts()[[k, m]] != 0.0).collect())
        .collect();
    let size: usize = support.iter().map(Vec::len).sum();
    let mut out = vec![1.0; km1 * p];
    if size == 0 {
        return Some(out);
    }
    let refit = match fit_unpenalized_restricted(&half_b, &support) {
        Ok(f) => f,
        Err(e) => {
            warn!("split {b}: refit failed: {e}");
            return None;
        }
    };
    for (k, s) in support.iter().enumerate() {
        for &m in s {
            let est = refit.beta.contrasts()[[k, m]];
            let se = refit.std_error(k, m).expect("selected coordinate is free");
            out[k * p + m] = (size as f64 * p_value_from_se(est, se)).min(1.0);
        }
    }
    Some(out)
}

/// Multiple sample splitting: select on one half by cross-validated Lasso,
/// test on the other half by Wald tests of the restricted MLE.
pub fn multiple_splitting(
    data: &Dataset,
    n_splits: usize,
    seed: u64,
    opts: &SplitOptions,
) -> Result<SplitResult> {
    if n_splits < 2 {
        return argument(format!("need at least 2 splits, got {n_splits}"));
    }
    data.require_all_classes()?;
    let d = (data.num_classes() - 1) * data.p();
    let splits: Vec<Option<Vec<f64>>> = (0..n_splits)
        .into_par_iter()
        .map(|b| one_split(data, seed, b, opts))
        .collect();
    let n_failed = splits.iter().filter(|s| s.is_none()).count();
    let mut split_p_values = Array2::ones((n_splits, d));
    for (b, s) in splits.iter().enumerate() {
        if let Some(v) = s {
            split_p_values.row_mut(b).assign(&Array1::from_vec(v.clone()));
        }
    }
    let p_values = (0..d)
        .map(|j| aggregate_p_values(&split_p_values.column(j).to_vec(), opts.gamma_min))
        .collect::<Result<_>>()?;
    Ok(SplitResult {
        p_values,
        n_splits,
        n_failed,
        seed,
        split_p_values,
    })
}
