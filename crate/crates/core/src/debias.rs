//! Debiased-Lasso inference: nodewise estimation of the rows of `Θ̂ ≈ Σ̂⁻¹`,
//! the one-step corrected estimator, confidence intervals, p-values and the
//! Bonferroni adjustment.
//!
//! When the fit carries intercepts, `Σ̂` is formed on the design `[X, 1]` so
//! the intercept directions are regressed out of every nodewise row (they are
//! left unpenalized there). Only the `(K-1)p` contrast coordinates are reported.

use log::warn;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};


use crate::error::{argument, Error, Result};
use crate::model::{self, CoefficientSet, Dataset, SigmaHat};
use crate::rng;
use crate::solver::{self, shrink, CvResult, FitResult, LambdaPath, SolverOptions};

/// Divisor used in the coordinate update of the nodewise program.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodewiseDivisor {
    /// `(Σ̂_{-j,-j})_{rr}`, which solves each coordinate subproblem exactly.
    Consistent,
    /// `Σ̂_{jj}` for every coordinate, as the update is sometimes written.
    Literal,
}

#[derive(Debug, Clone)]
pub struct NodewiseOptions {
    /// Largest change of any `γ` entry over a sweep that counts as converged.
    pub tol: f64,
    pub max_iter: usize,
    pub divisor: NodewiseDivisor,
}

impl Default for NodewiseOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 10_000,
            divisor: NodewiseDivisor::Consistent,
        }
    }
}

/// One estimated row of `Θ̂`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaRow {
    /// Zero-based coordinate of the row.
    pub j: usize,
    /// Coefficients on the other coordinates, in order with `j` removed.
    pub gamma: Array1<f64>,
    pub tau_sq: f64,
    /// `τ̂⁻²` at `j`, `-γ̂/τ̂²` elsewhere.
    pub theta_row: Array1<f64>,
    pub lambda_j: f64,
    pub converged: bool,
    pub n_sweeps: usize,
}

/// Solution of `min_γ -Σ̂_{j,-j}γ + ½γᵀΣ̂_{-j,-j}γ + λ Σ_{r penalized} |γ_r|`
/// by cyclic coordinate descent, warm-started from `init`.
fn nodewise_gamma(
    sigma: ArrayView2<f64>,
    j: usize,
    lambda: f64,
    penalized: &[bool],
    init: Option<&[f64]>,
    opts: &NodewiseOptions,
) -> (Vec<f64>, bool, usize) {
    let d = sigma.nrows();
    let others: Vec<usize> = (0..d).filter(|&r| r != j).collect();
    let mut gamma = init.map_or_else(|| vec![0.0; d - 1], |g| g.to_vec());
    // a = Σ̂_{-j,-j} γ over the full index range (entry j unused)
    let mut a = vec![0.0; d];
    for (idx, &r) in others.iter().enumerate() {
        if gamma[idx] != 0.0 {
            for (v, s) in a.iter_mut().zip(sigma.row(r)) {
                *v += gamma[idx] * s;
            }
        }
    }
    let sjj = sigma[[j, j]];
    let mut full = true;
    for sweep in 1..=opts.max_iter {
        let mut max_change = 0.0_f64;
        for (idx, &r) in others.iter().enumerate() {
            if !full && gamma[idx] == 0.0 {
                continue;
            }
            let srr = sigma[[r, r]];
            let div = match opts.divisor {
                NodewiseDivisor::Consistent => srr,
                NodewiseDivisor::Literal => sjj,
            };
            if !(div > 0.0) {
                continue;
            }
            let partial = a[r] - srr * gamma[idx];
            let pen = if penalized[r] { lambda } else { 0.0 };
            let new = shrink(sigma[[r, j]] - partial, pen) / div;
            let step = new - gamma[idx];
            if step != 0.0 {
                if !step.is_finite() {
                    return (gamma, false, sweep);
                }
                for (v, s) in a.iter_mut().zip(sigma.row(r)) {
                    *v += step * s;
                }
                gamma[idx] = new;
                max_change = max_change.max(step.abs());
            }
        }
        if max_change < opts.tol {
            if full {
                return (gamma, true, sweep);
            }
            full = true;
        } else {
            full = false;
        }
    }
    (gamma, false, opts.max_iter)
}

/// Nodewise program for row `j` with the unpenalized coordinates minimized
/// out in closed form. Intercept directions carry the feature means, so
/// leaving them in makes coordinate descent crawl; the reduced matrix is the
/// Schur complement `Σ_KK - Σ_KF Σ_FF⁻¹ Σ_FK` and has the same minimizer.
struct Profiled {
    /// `j` and the penalized coordinates, ascending.
    keep: Vec<usize>,
    /// Unpenalized coordinates other than `j`.
    free: Vec<usize>,
    /// Position of `j` in `keep`.
    jj: usize,
    reduced: Array2<f64>,
    free_chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

impl Profiled {
    /// `None` when nothing needs profiling or `Σ_FF` is not positive definite.
    fn new(sigma: ArrayView2<f64>, j: usize, penalized: &[bool]) -> Option<Self> {
        let d = sigma.nrows();
        let free: Vec<usize> = (0..d).filter(|&r| r != j && !penalized[r]).collect();
        if free.is_empty() {
            return None;
        }
        let keep: Vec<usize> = (0..d).filter(|&r| r == j || penalized[r]).collect();
        let jj = keep.iter().position(|&r| r == j)?;
        let ff = nalgebra::DMatrix::from_fn(free.len(), free.len(), |a, b| sigma[[free[a], free[b]]]);
        let free_chol = ff.cholesky()?;
        // w = Σ_FF⁻¹ Σ_FK
        let fk = nalgebra::DMatrix::from_fn(free.len(), keep.len(), |a, b| sigma[[free[a], keep[b]]]);
        let w = free_chol.solve(&fk);
        let mut reduced = Array2::zeros((keep.len(), keep.len()));
        for (a, &r) in keep.iter().enumerate() {
            for (b, &s) in keep.iter().enumerate() {
                let corr: f64 = (0..free.len()).map(|f| fk[(f, a)] * w[(f, b)]).sum();
                reduced[[a, b]] = sigma[[r, s]] - corr;
            }
        }
        // only the literal divisor reads the diagonal at j; keep it unreduced
        reduced[[jj, jj]] = sigma[[j, j]];
        Some(Self { keep, free, jj, reduced, free_chol })
    }

    /// Solves at `lambda`, returning `γ` over all coordinates other than `j`.
    fn solve(
        &self,
        sigma: ArrayView2<f64>,
        j: usize,
        lambda: f64,
        init: Option<&[f64]>,
        opts: &NodewiseOptions,
    ) -> (Vec<f64>, bool, usize) {
        let d = sigma.nrows();
        let slot = |r: usize| if r < j { r } else { r - 1 };
        let init: Option<Vec<f64>> = init.map(|g| {
            self.keep.iter().filter(|&&r| r != j).map(|&r| g[slot(r)]).collect()
        });
        let mask = vec![true; self.keep.len()];
        let (reduced_gamma, converged, sweeps) =
            nodewise_gamma(self.reduced.view(), self.jj, lambda, &mask, init.as_deref(), opts);
        let mut gamma = vec![0.0; d - 1];
        for (&r, &g) in self.keep.iter().filter(|&&r| r != j).zip(&reduced_gamma) {
            gamma[slot(r)] = g;
        }
        // γ_F = Σ_FF⁻¹ (Σ_Fj - Σ_FP γ_P)
        let rhs = nalgebra::DVector::from_iterator(
            self.free.len(),
            self.free.iter().map(|&f| {
                let mut v = sigma[[f, j]];
                for &r in self.keep.iter().filter(|&&r| r != j) {
                    v -= sigma[[f, r]] * gamma[slot(r)];
                }
                v
            }),
        );
        let gf = self.free_chol.solve(&rhs);
        for (a, &f) in self.free.iter().enumerate() {
            gamma[slot(f)] = gf[a];
        }
        (gamma, converged, sweeps)
    }
}

/// Nodewise solution through [`Profiled`] when some coordinates are unpenalized.
fn solve_nodewise(
    sigma: ArrayView2<f64>,
    j: usize,
    lambda: f64,
    penalized: &[bool],
    profiled: Option<&Profiled>,
    init: Option<&[f64]>,
    opts: &NodewiseOptions,
) -> (Vec<f64>, bool, usize) {
    match profiled {
        Some(p) => p.solve(sigma, j, lambda, init, opts),
        None => nodewise_gamma(sigma, j, lambda, penalized, init, opts),
    }
}

fn assemble_row(
    sigma: ArrayView2<f64>,
    j: usize,
    lambda_j: f64,
    gamma: Vec<f64>,
    converged: bool,
    n_sweeps: usize,
) -> Result<ThetaRow> {
    let d = sigma.nrows();
    let mut tau_sq = sigma[[j, j]];
    let mut idx = 0;
    for r in 0..d {
        if r != j {
            tau_sq -= sigma[[j, r]] * gamma[idx];
            idx += 1;
        }
    }
    if !(tau_sq > 1e-12) {
        return Err(Error::Inference(format!(
            "nodewise row {j}: tau^2 = {tau_sq:e} is not positive"
        )));
    }
    let mut theta_row = Array1::zeros(d);
    let mut idx = 0;
    for r in 0..d {
        theta_row[r] = if r == j {
            1.0 / tau_sq
        } else {
            idx += 1;
            -gamma[idx - 1] / tau_sq
        };
    }
    Ok(ThetaRow {
        j,
        gamma: Array1::from_vec(gamma),
        tau_sq,
        theta_row,
        lambda_j,
        converged,
        n_sweeps,
    })
}

fn check_row_args(sigma: &SigmaHat, j: usize, lambda_j: f64) -> Result<()> {
    if j >= sigma.dim() {
        return argument(format!("row {j} out of range for dimension {}", sigma.dim()));
    }
    if sigma.dim() < 2 {
        return argument("nodewise regression needs at least two coordinates");
    }
    if !(lambda_j > 0.0 && lambda_j.is_finite()) {
        return argument(format!("lambda_j must be positive, got {lambda_j}"));
    }
    Ok(())
}

/// Row `j` of `Θ̂` at penalty `lambda_j`, with every other coordinate penalized.
pub fn nodewise_row(
    sigma: &SigmaHat,
    j: usize,
    lambda_j: f64,
    opts: &NodewiseOptions,
) -> Result<ThetaRow> {
    nodewise_row_masked(sigma, j, lambda_j, &vec![true; sigma.dim()], opts)
}

/// [`nodewise_row`] with coordinates where `penalized` is false left unpenalized.
pub fn nodewise_row_masked(
    sigma: &SigmaHat,
    j: usize,
    lambda_j: f64,
    penalized: &[bool],
    opts: &NodewiseOptions,
) -> Result<ThetaRow> {
    check_row_args(sigma, j, lambda_j)?;
    if penalized.len() != sigma.dim() {
        return argument("penalty mask length differs from sigma dimension");
    }
    let m = sigma.matrix.view();
    let profiled = Profiled::new(m, j, penalized);
    let (gamma, converged, sweeps) = solve_nodewise(m, j, lambda_j, penalized, profiled.as_ref(), None, opts);
    assemble_row(m, j, lambda_j, gamma, converged, sweeps)
}

/// Nodewise program value `-Σ_{j,-j}γ + ½γᵀΣ_{-j,-j}γ` (constant term dropped).
pub fn nodewise_loss(sigma: ArrayView2<f64>, j: usize, gamma: ArrayView1<f64>) -> f64 {
    // (full index, value) of the nonzero entries
    let support: Vec<(usize, f64)> = gamma
        .iter()
        .enumerate()
        .filter(|(_, g)| **g != 0.0)
        .map(|(a, &g)| (if a < j { a } else { a + 1 }, g))
        .collect();
    let mut lin = 0.0;
    let mut quad = 0.0;
    for &(r, gr) in &support {
        lin += sigma[[j, r]] * gr;
        for &(s, gs) in &support {
            quad += gr * sigma[[r, s]] * gs;
        }
    }
    -lin + 0.5 * quad
}

/// Training and validation `Σ̂` of every fold.
#[derive(Debug, Clone)]
pub struct FoldSigmas {
    pub train: Vec<Array2<f64>>,
    pub validation: Vec<Array2<f64>>,
}

impl FoldSigmas {
    /// Builds per-fold `Σ̂` at `beta` on a class-stratified split drawn from `seed`.
    pub fn from_data(data: &Dataset, beta: &CoefficientSet, n_folds: usize, seed: u64) -> Result<Self> {
        if n_folds < 2 || n_folds > data.n() {
            return argument(format!("need 2 <= folds <= n, got {n_folds}"));
        }
        let folds = solver::stratified_folds(data, n_folds, &mut rng::seeded(seed));
        let mut train = Vec::with_capacity(n_folds);
        let mut validation = Vec::with_capacity(n_folds);
        for f in 0..n_folds {
            let (tr, va): (Vec<usize>, Vec<usize>) = (0..data.n()).partition(|&i| folds[i] != f);
            train.push(sigma_matrix(&data.subset(&tr), beta));
            validation.push(sigma_matrix(&data.subset(&va), beta));
        }
        Ok(Self { train, validation })
    }

    pub fn len(&self) -> usize {
        self.train.len()
    }

    pub fn is_empty(&self) -> bool {
        self.train.is_empty()
    }
}

/// `Σ̂` on the design used for inference: `[X, 1]` when `beta` has intercepts.
fn sigma_matrix(data: &Dataset, beta: &CoefficientSet) -> Array2<f64> {
    let probs = model::probability_matrix(data.features().view(), beta);
    if beta.has_intercepts() {
        let z = model::with_intercept_column(data.features().view());
        model::sigma_from_design(z.view(), &probs)
    } else {
        model::sigma_from_design(data.features().view(), &probs)
    }
}

/// Default grid for row `j`: `len` log-spaced values from the largest
/// off-diagonal `|Σ̂_{jr}|` (or `Σ̂_jj` when all vanish) down to `ratio` of it.
pub fn default_lambda_grid(sigma: ArrayView2<f64>, j: usize, len: usize, ratio: f64) -> Result<LambdaPath> {
    let top = sigma
        .row(j)
        .iter()
        .enumerate()
        .filter(|(r, _)| *r != j)
        .map(|(_, v)| v.abs())
        .fold(0.0, f64::max);
    let top = if top > 0.0 { top } else { sigma[[j, j]] };
    LambdaPath::log_spaced(top, ratio, len)
}

const SELECTION_TOL: f64 = 1e-6;

/// Penalty for row `j` minimizing the out-of-fold nodewise loss. Ties go to the larger value.
pub fn select_lambda_j(
    folds: &FoldSigmas,
    j: usize,
    grid: &LambdaPath,
    penalized: &[bool],
    opts: &NodewiseOptions,
) -> Result<f64> {
    if folds.is_empty() {
        return argument("no folds supplied");
    }
    // selection only compares losses, so the fold fits stop earlier
    let opts = &NodewiseOptions {
        tol: opts.tol.max(SELECTION_TOL),
        ..opts.clone()
    };
    let mut total = vec![0.0; grid.len()];
    for (train, val) in folds.train.iter().zip(&folds.validation) {
        let profiled = Profiled::new(train.view(), j, penalized);
        let mut warm: Option<Vec<f64>> = None;
        for (l, &lam) in grid.values().iter().enumerate() {
            let (gamma, _, _) =
                solve_nodewise(train.view(), j, lam, penalized, profiled.as_ref(), warm.as_deref(), opts);
            total[l] += nodewise_loss(val.view(), j, ArrayView1::from(&gamma[..]));
            warm = Some(gamma);
        }
    }
    let mut best = 0;
    for l in 1..total.len() {
        if total[l] < total[best] {
            best = l;
        }
    }
    Ok(grid.values()[best])
}

/// `b̂ = β̂ - Θ̂ ∇(1/n)L_n(β̂)` on the rows that are present.
pub fn debiased_estimator(
    data: &Dataset,
    beta_hat: &CoefficientSet,
    theta: &[Option<ThetaRow>],
) -> Result<Vec<Option<f64>>> {
    let score = inference_score(data, beta_hat)?;
    let coeffs = inference_coefficients(beta_hat);
    if theta.len() != beta_hat.dim() {
        return argument(format!(
            "expected {} theta rows, got {}",
            beta_hat.dim(),
            theta.len()
        ));
    }
    theta
        .iter()
        .enumerate()
        .map(|(s, row)| match row {
            None => Ok(None),
            Some(row) => {
                if row.theta_row.len() != score.len() {
                    return argument("theta row length differs from the inference dimension");
                }
                let j = inference_index(beta_hat, s);
                Ok(Some(coeffs[j] - row.theta_row.dot(&score)))
            }
        })
        .collect()
}

/// Stacked coefficients on the inference coordinates.
fn inference_coefficients(beta: &CoefficientSet) -> Array1<f64> {
    match beta.intercepts() {
        None => beta.stacked(),
        Some(b0) => {
            let p = beta.p();
            let mut out = Array1::zeros(beta.dim() + b0.len());
            for k in 0..b0.len() {
                for m in 0..p {
                    out[k * (p + 1) + m] = beta.contrasts()[[k, m]];
                }
                out[k * (p + 1) + p] = b0[k];
            }
            out
        }
    }
}

/// Gradient of the averaged loss on the inference coordinates.
fn inference_score(data: &Dataset, beta: &CoefficientSet) -> Result<Array1<f64>> {
    if !beta.has_intercepts() {
        return model::score(data, beta);
    }
    if data.p() != beta.p() || data.num_classes() != beta.num_classes() {
        return argument("coefficient and data dimensions disagree");
    }
    let probs = model::probability_matrix(data.features().view(), beta);
    let z = model::with_intercept_column(data.features().view());
    let km1 = beta.num_classes() - 1;
    let resid = Array2::from_shape_fn((data.n(), km1), |(i, k)| probs[[i, k]] - data.indicator(i, k));
    let g = resid.t().dot(&z) / data.n() as f64;
    Ok(Array1::from_iter(g.iter().copied()))
}

/// Position of stacked contrast coordinate `s` among the inference coordinates.
fn inference_index(beta: &CoefficientSet, s: usize) -> usize {
    if beta.has_intercepts() {
        let p = beta.p();
        (s / p) * (p + 1) + s % p
    } else {
        s
    }
}

/// `√(Θ̂_jᵀ Σ̂ Θ̂_j / n)`; tiny negative quadratic forms are clamped to zero.
pub fn standard_error(theta_j: &ThetaRow, sigma: &SigmaHat, n: usize) -> Result<f64> {
    if theta_j.theta_row.len() != sigma.dim() {
        return argument("theta row length differs from sigma dimension");
    }
    if n == 0 {
        return argument("n must be positive");
    }
    let q = sigma.quadratic_form(theta_j.theta_row.view());
    if q < -1e-10 {
        return Err(Error::Inference(format!(
            "variance form for row {} is negative ({q:e})",
            theta_j.j
        )));
    }
    Ok((q.max(0.0) / n as f64).sqrt())
}

/// `z` with `2Φ(-z) = alpha`, polished against the erfc used for p-values so
/// that intervals and p-values agree at the boundary.
fn two_sided_critical(alpha: f64) -> f64 {
    let mut z = -Normal::new(0.0, 1.0).unwrap().inverse_cdf(alpha / 2.0);
    for _ in 0..3 {
        let f = libm::erfc(z / std::f64::consts::SQRT_2) - alpha;
        let density = (2.0 / std::f64::consts::PI).sqrt() * (-0.5 * z * z).exp();
        if !(density > 0.0) {
            break;
        }
        z += f / density;
    }
    z
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return argument(format!("alpha must lie in (0, 1), got {alpha}"));
    }
    Ok(())
}

/// `b ± q_{α/2}·se`.
pub fn interval_from_se(b: f64, se: f64, alpha: f64) -> Result<(f64, f64)> {
    check_alpha(alpha)?;
    let half = two_sided_critical(alpha) * se;
    Ok((b - half, b + half))
}

/// Two-sided normal p-value `2Φ(-|b|/se)`.
pub fn p_value_from_se(b: f64, se: f64) -> f64 {
    if b == 0.0 {
        return 1.0;
    }
    if se == 0.0 {
        warn!("zero standard error with nonzero estimate; p-value set to 0");
        return 0.0;
    }
    libm::erfc(b.abs() / se / std::f64::consts::SQRT_2).min(1.0)
}

pub fn confidence_interval(
    b_hat_j: f64,
    theta_j: &ThetaRow,
    sigma: &SigmaHat,
    n: usize,
    alpha: f64,
) -> Result<(f64, f64)> {
    interval_from_se(b_hat_j, standard_error(theta_j, sigma, n)?, alpha)
}

pub fn p_value(b_hat_j: f64, theta_j: &ThetaRow, sigma: &SigmaHat, n: usize) -> Result<f64> {
    Ok(p_value_from_se(b_hat_j, standard_error(theta_j, sigma, n)?))
}

/// `min(1, m·p)` for each p-value.
pub fn bonferroni(p_values: &[f64], m: usize) -> Result<Vec<f64>> {
    if m < p_values.len() {
        return argument(format!("m = {m} is smaller than the number of tests {}", p_values.len()));
    }
    if p_values.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return argument("p-values must lie in [0, 1]");
    }
    Ok(p_values.iter().map(|p| (m as f64 * p).min(1.0)).collect())
}

#[derive(Debug, Clone)]
pub struct InferenceOptions {
    pub solver: SolverOptions,
    /// Folds for choosing the Lasso penalty.
    pub cv_folds: usize,
    pub nodewise: NodewiseOptions,
    /// Folds for choosing each nodewise penalty.
    pub nodewise_folds: usize,
    pub nodewise_grid_len: usize,
    pub nodewise_grid_ratio: f64,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        Self {
            solver: SolverOptions::default(),
            cv_folds: 10,
            nodewise: NodewiseOptions::default(),
            nodewise_folds: 5,
            nodewise_grid_len: 20,
            nodewise_grid_ratio: 0.01,
        }
    }
}

/// Inference for one contrast coordinate. Fields are `None` when the
/// coordinate's nodewise row failed; `failure` says why.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateInference {
    /// Stacked zero-based index `k·p + m`.
    pub index: usize,
    /// Contrast class in `1..K-1`.
    pub class: usize,
    /// Zero-based feature.
    pub feature: usize,
    pub beta_hat: f64,
    pub b_hat: Option<f64>,
    pub se: Option<f64>,
    pub ci_lower: Option<f64>,
    pub ci_upper: Option<f64>,
    pub p_value: Option<f64>,
    pub p_adjusted: Option<f64>,
    pub lambda_j: Option<f64>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone)]
pub struct InferenceReport {
    pub alpha: f64,
    pub lambda: f64,
    pub beta: CoefficientSet,
    pub coordinates: Vec<CoordinateInference>,
}

impl InferenceReport {
    pub fn n_failed(&self) -> usize {
        self.coordinates.iter().filter(|c| c.failure.is_some()).count()
    }
}

/// Cross-validated Lasso fit followed by [`infer_at`].
pub fn infer(data: &Dataset, cv_seed: u64, alpha: f64, opts: &InferenceOptions) -> Result<(CvResult, FitResult, InferenceReport)> {
    check_alpha(alpha)?;
    let (cv, fit) = solver::fit_cv(data, opts.cv_folds, cv_seed, &opts.solver)?;
    let report = infer_at(data, &fit.beta, fit.lambda, cv_seed, alpha, opts)?;
    Ok((cv, fit, report))
}

/// Debiased inference around a given Lasso estimate.
pub fn infer_at(
    data: &Dataset,
    beta_hat: &CoefficientSet,
    lambda: f64,
    seed: u64,
    alpha: f64,
    opts: &InferenceOptions,
) -> Result<InferenceReport> {
    check_alpha(alpha)?;
    if data.p() != beta_hat.p() || data.num_classes() != beta_hat.num_classes() {
        return argument("coefficient and data dimensions disagree");
    }
    let sigma = SigmaHat::new(sigma_matrix(data, beta_hat), data.n())?;
    let d = sigma.dim();
    let p = beta_hat.p();
    let penalized: Vec<bool> = if beta_hat.has_intercepts() {
        (0..d).map(|r| r % (p + 1) != p).collect()
    } else {
        vec![true; d]
    };
    let folds = FoldSigmas::from_data(data, beta_hat, opts.nodewise_folds, rng::derive_seed(seed, 1))?;

    let rows: Vec<Result<ThetaRow>> = (0..beta_hat.dim())
        .into_par_iter()
        .map(|s| {
            let j = inference_index(beta_hat, s);
            let grid = default_lambda_grid(
                sigma.matrix.view(),
                j,
                opts.nodewise_grid_len,
                opts.nodewise_grid_ratio,
            )?;
            let lambda_j = select_lambda_j(&folds, j, &grid, &penalized, &opts.nodewise)?;
            let row = nodewise_row_masked(&sigma, j, lambda_j, &penalized, &opts.nodewise)?;
            if !row.converged {
                return Err(Error::Inference(format!(
                    "nodewise row {j} did not converge in {} sweeps",
                    row.n_sweeps
                )));
            }
            Ok(row)
        })
        .collect();

    let theta: Vec<Option<ThetaRow>> = rows.iter().map(|r| r.as_ref().ok().cloned()).collect();
    let b_hat = debiased_estimator(data, beta_hat, &theta)?;
    let m = beta_hat.dim();
    let stacked = beta_hat.stacked();
    let mut coordinates = Vec::with_capacity(m);
    for (s, row) in rows.into_iter().enumerate() {
        let mut c = CoordinateInference {
            index: s,
            class: s / p + 1,
            feature: s % p,
            beta_hat: stacked[s],
            b_hat: None,
            se: None,
            ci_lower: None,
            ci_upper: None,
            p_value: None,
            p_adjusted: None,
            lambda_j: None,
            failure: None,
        };
        let estimate = row.and_then(|row| {
            let b = b_hat[s].expect("rows present have estimates");
            let se = standard_error(&row, &sigma, data.n())?;
            Ok((row.lambda_j, b, se))
        });
        match estimate {
            Ok((lambda_j, b, se)) => {
                let (lo, hi) = interval_from_se(b, se, alpha)?;
                let pv = p_value_from_se(b, se);
                c.b_hat = Some(b);
                c.se = Some(se);
                c.ci_lower = Some(lo);
                c.ci_upper = Some(hi);
                c.p_value = Some(pv);
                c.p_adjusted = Some((m as f64 * pv).min(1.0));
                c.lambda_j = Some(lambda_j);
            }
            Err(e) => {
                warn!("coordinate {s} unavailable: {e}");
                c.failure = Some(e.to_string());
            }
        }
        coordinates.push(c);
    }
    Ok(InferenceReport {
        alpha,
        lambda,
        beta: beta_hat.clone(),
        coordinates,
    })
}
