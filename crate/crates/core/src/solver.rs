//! Cyclic coordinate descent for the l1-penalized multinomial contrast model,
//! with warm-started penalty paths, stratified cross-validation and
//! prediction.
//!
//! The objective is the averaged negative log-likelihood plus `λ‖β‖₁`;
//! intercepts, when present, are unpenalized.

use log::{debug, warn};
use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{argument, Error, Result};
use crate::model::{self, posterior_probs, CoefficientSet, Dataset};

/// `S(a, b) = sign(a)·max(|a| - b, 0)`.
pub fn soft_threshold(a: f64, b: f64) -> Result<f64> {
    if !(b >= 0.0) {
        return argument(format!("threshold must be nonnegative, got {b}"));
    }
    Ok(shrink(a, b))
}

#[inline]
pub(crate) fn shrink(a: f64, b: f64) -> f64 {
    if a > b {
        a - b
    } else if a < -b {
        a + b
    } else {
        0.0
    }
}

/// Strictly decreasing sequence of positive penalty levels.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaPath {
    values: Vec<f64>,
}

impl LambdaPath {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return argument("lambda path is empty");
        }
        if values.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return argument("lambda values must be positive and finite");
        }
        if values.windows(2).any(|w| w[1] >= w[0]) {
            return argument("lambda path must be strictly decreasing");
        }
        Ok(Self { values })
    }

    /// `len` log-spaced values from `max` down to `ratio·max`.
    pub fn log_spaced(max: f64, ratio: f64, len: usize) -> Result<Self> {
        if !(max > 0.0 && max.is_finite()) {
            return argument(format!("path maximum must be positive, got {max}"));
        }
        if !(ratio > 0.0 && ratio < 1.0) {
            return argument(format!("path ratio must lie in (0, 1), got {ratio}"));
        }
        if len == 1 {
            return Self::new(vec![max]);
        }
        let (hi, lo) = (max.ln(), (max * ratio).ln());
        let step = (lo - hi) / (len - 1) as f64;
        Self::new((0..len).map(|i| (hi + step * i as f64).exp()).collect())
    }

    /// Default grid: 100 values from `lambda_max` down to 1% of it (5% when `p > n`).
    pub fn for_data(data: &Dataset, opts: &SolverOptions) -> Result<Self> {
        let top = lambda_max(data, opts.fit_intercept);
        if top <= 0.0 {
            return Err(Error::Data(
                "every feature is orthogonal to the labels; penalty path is degenerate".into(),
            ));
        }
        let ratio = if data.p() > data.n() { 0.05 } else { 0.01 };
        Self::log_spaced(top, ratio, opts.path_len)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct SolverOptions {
    /// Largest coefficient change over a full sweep that counts as converged.
    pub tol: f64,
    /// Cap on outer sweeps and on inner sweeps per class.
    pub max_sweeps: usize,
    pub kkt_tol: f64,
    pub fit_intercept: bool,
    /// Fit on unit-variance features and map coefficients back.
    pub standardize: bool,
    pub path_len: usize,
    pub algorithm: Algorithm,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-7,
            max_sweeps: 100,
            kkt_tol: 1e-5,
            fit_intercept: false,
            standardize: false,
            path_len: 100,
            algorithm: Algorithm::ProximalNewton,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub beta: CoefficientSet,
    pub lambda: f64,
    /// Averaged loss plus penalty at `beta`.
    pub objective: f64,
    pub n_sweeps: usize,
    pub converged: bool,
    /// Block sweeps that increased the objective and were redone with curvature weights.
    pub fallback_sweeps: usize,
    /// Stacked coordinates skipped because their curvature was zero.
    pub skipped: Vec<usize>,
    pub kkt_residual: f64,
}

/// Largest penalty for which the all-zero contrast solution is optimal.
pub fn lambda_max(data: &Dataset, fit_intercept: bool) -> f64 {
    let (n, k) = (data.n() as f64, data.num_classes());
    let base: Vec<f64> = if fit_intercept {
        data.class_counts().iter().map(|&c| c as f64 / n).collect()
    } else {
        vec![1.0 / k as f64; k]
    };
    let x = data.features();
    let mut best = 0.0_f64;
    for c in 0..k - 1 {
        for m in 0..data.p() {
            let g: f64 = (0..data.n())
                .map(|i| (data.indicator(i, c) - base[c]) * x[[i, m]])
                .sum::<f64>()
                / n;
            best = best.max(g.abs());
        }
    }
    best
}

/// Penalized objective `(1/n) L_n(β) + λ‖β‖₁`.
pub fn penalized_objective(data: &Dataset, beta: &CoefficientSet, lambda: f64) -> Result<f64> {
    let loss = model::avg_neg_log_likelihood(data, beta)?;
    Ok(loss + lambda * beta.contrasts().iter().map(|v| v.abs()).sum::<f64>())
}

/// Largest violation of the lasso optimality conditions at `beta`.
pub fn kkt_residual(data: &Dataset, beta: &CoefficientSet, lambda: f64) -> Result<f64> {
    let g = model::score(data, beta)?;
    let mut worst = kkt_from_score(g.view(), beta, lambda);
    if let Some(b0) = beta.intercepts() {
        let probs = model::probability_matrix(data.features().view(), beta);
        for k in 0..b0.len() {
            let g0: f64 = (0..data.n())
                .map(|i| probs[[i, k]] - data.indicator(i, k))
                .sum::<f64>()
                / data.n() as f64;
            worst = worst.max(g0.abs());
        }
    }
    Ok(worst)
}

fn kkt_from_score(g: ArrayView1<f64>, beta: &CoefficientSet, lambda: f64) -> f64 {
    g.iter()
        .zip(beta.contrasts().iter())
        .map(|(&gj, &bj)| {
            if bj != 0.0 {
                (gj + lambda * bj.signum()).abs()
            } else {
                (gj.abs() - lambda).max(0.0)
            }
        })
        .fold(0.0, f64::max)
}

/// Data laid out for column sweeps.
struct Design<'a> {
    data: &'a Dataset,
    /// `p × n`, row `j` is feature column `j`.
    xt: Array2<f64>,
    /// `n × (p+1)` design with a trailing column of ones.
    z: Array2<f64>,
    /// Transpose of `z`.
    zt: Array2<f64>,
    /// `n × (K-1)` class indicators.
    onehot: Array2<f64>,
}

impl<'a> Design<'a> {
    fn new(data: &'a Dataset) -> Self {
        let km1 = data.num_classes() - 1;
        let onehot = Array2::from_shape_fn((data.n(), km1), |(i, k)| data.indicator(i, k));
        let z = model::with_intercept_column(data.features().view());
        Self {
            data,
            xt: data.features().t().as_standard_layout().into_owned(),
            zt: z.t().as_standard_layout().into_owned(),
            z,
            onehot,
        }
    }
}

/// Which coordinate-descent scheme `fit_single` runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    /// Proximal Newton steps on all classes at once: the penalized quadratic
    /// model built from the full multinomial Hessian is solved by cyclic
    /// coordinate descent, then a backtracking line search on the objective.
    ProximalNewton,
    /// One class block at a time with the given working weights.
    ClassCyclic(Weighting),
}

/// Working weight in the per-class quadratic model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Weighting {
    /// `w_i = p_k(x_i; β)`.
    Posterior,
    /// `w_i = p_k(1 - p_k) + 1e-5`, the diagonal curvature, with a backtracking line search.
    Curvature,
}

/// Mutable coordinate-descent state at one penalty level.
struct CdState<'d, 'a> {
    design: &'d Design<'a>,
    lambda: f64,
    km1: usize,
    beta: Array2<f64>,
    intercepts: Option<Vec<f64>>,
    /// `n × (K-1)`.
    eta: Array2<f64>,
    /// `n × K`.
    probs: Array2<f64>,
    /// Per-row log partition function.
    lse: Vec<f64>,
    skipped: Vec<bool>,
    inner_sweeps: usize,
    /// Joint quadratic model carried between proximal Newton steps.
    hessian: Option<JointModel>,
}

/// Quadratic model of the loss in the coordinates of one class:
/// `-gᵀδ + ½ δᵀHδ`, with `H = (1/n) Zᵀ diag(w) Z` and `Z = [X, 1]`.
struct BlockModel {
    weights: Vec<f64>,
    /// Negative gradient, features then intercept.
    neg_grad: Vec<f64>,
    diag: Vec<f64>,
    /// Lazily computed Hessian columns.
    columns: Vec<Option<Vec<f64>>>,
}

/// Joint counterpart of [`BlockModel`] over all `(K-1)(p+1)` coordinates.
struct JointModel {
    /// Rows `k·(K-1) + l` hold `p_k(δ_kl - p_l)` per sample (plus a small floor on the diagonal).
    weights: Array2<f64>,
    neg_grad: Vec<f64>,
    diag: Vec<f64>,
    columns: Vec<Option<Vec<f64>>>,
    /// Linear predictors the weights were computed at.
    eta_built: Array2<f64>,
}

/// Largest change in any linear predictor before the joint Hessian is recomputed.
const HESSIAN_DRIFT: f64 = 0.1;

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

impl<'d, 'a> CdState<'d, 'a> {
    fn new(design: &'d Design<'a>, lambda: f64, init: &CoefficientSet) -> Self {
        let data = design.data;
        let km1 = data.num_classes() - 1;
        let eta = model::linear_predictors(data.features().view(), init);
        let mut st = Self {
            design,
            lambda,
            km1,
            beta: init.contrasts().clone(),
            intercepts: init.intercepts().map(|b| b.to_vec()),
            eta,
            probs: Array2::zeros((data.n(), km1 + 1)),
            lse: vec![0.0; data.n()],
            skipped: vec![false; km1 * data.p()],
            inner_sweeps: 0,
            hessian: None,
        };
        for i in 0..data.n() {
            st.refresh_row(i);
        }
        st
    }

    fn n(&self) -> usize {
        self.design.data.n()
    }

    fn p(&self) -> usize {
        self.design.data.p()
    }

    #[inline]
    fn refresh_row(&mut self, i: usize) {
        let eta = self.eta.row(i);
        let eta = eta.as_slice().unwrap();
        self.lse[i] = model::log_partition(eta);
        let mut row = self.probs.row_mut(i);
        model::softmax_into(eta, row.as_slice_mut().unwrap());
    }

    fn loss(&self) -> f64 {
        let data = self.design.data;
        let mut total = 0.0;
        for i in 0..self.n() {
            let y = data.class_of(i);
            let own = if y < self.km1 { self.eta[[i, y]] } else { 0.0 };
            total += self.lse[i] - own;
        }
        total / self.n() as f64
    }

    fn penalty(&self) -> f64 {
        self.lambda * self.beta.iter().map(|v| v.abs()).sum::<f64>()
    }

    fn objective(&self) -> f64 {
        self.loss() + self.penalty()
    }

    fn block_model(&self, k: usize, mode: Weighting) -> BlockModel {
        let n = self.n() as f64;
        let p = self.p();
        let weights: Vec<f64> = self
            .probs
            .column(k)
            .iter()
            .map(|&pk| match mode {
                Weighting::Posterior => pk,
                Weighting::Curvature => pk * (1.0 - pk) + 1e-5,
            })
            .collect();
        let resid: Array1<f64> = Array1::from_iter(
            (0..self.n()).map(|i| self.design.onehot[[i, k]] - self.probs[[i, k]]),
        );
        let mut neg_grad = (self.design.xt.dot(&resid) / n).to_vec();
        neg_grad.push(resid.sum() / n);
        let mut diag: Vec<f64> = self
            .design
            .xt
            .outer_iter()
            .map(|xj| xj.iter().zip(&weights).map(|(x, w)| w * x * x).sum::<f64>() / n)
            .collect();
        diag.push(weights.iter().sum::<f64>() / n);
        let mut bm = BlockModel {
            weights,
            neg_grad,
            diag,
            columns: vec![None; p + 1],
        };
        // columns of the current support in one matrix product
        let active: Vec<usize> = (0..p).filter(|&j| self.beta[[k, j]] != 0.0).collect();
        if active.len() > 1 {
            let mut weighted = self.design.xt.select(Axis(0), &active);
            for mut row in weighted.outer_iter_mut() {
                row.zip_mut_with(&ArrayView1::from(&bm.weights[..]), |x, w| *x *= w);
            }
            let block = weighted.dot(self.design.data.features()) / n;
            for (a, &j) in active.iter().enumerate() {
                let mut col = block.row(a).to_vec();
                col.push(weighted.row(a).sum() / n);
                bm.columns[j] = Some(col);
            }
        }
        bm
    }

    fn ensure_column(&self, bm: &mut BlockModel, j: usize) {
        if bm.columns[j].is_some() {
            return;
        }
        let n = self.n() as f64;
        let p = self.p();
        let wz: Array1<f64> = if j < p {
            Array1::from_iter(
                self.design
                    .xt
                    .row(j)
                    .iter()
                    .zip(&bm.weights)
                    .map(|(x, w)| x * w),
            )
        } else {
            Array1::from_vec(bm.weights.clone())
        };
        let mut col = (self.design.xt.dot(&wz) / n).to_vec();
        col.push(wz.sum() / n);
        bm.columns[j] = Some(col);
    }

    /// Coordinate descent on the penalized quadratic model of class `k`.
    /// Returns the step `δ` (features then intercept).
    fn solve_block(&mut self, k: usize, bm: &mut BlockModel, tol: f64, max_sweeps: usize) -> Vec<f64> {
        let p = self.p();
        let has_b0 = self.intercepts.is_some();
        let mut delta = vec![0.0; p + 1];
        let mut hd = vec![0.0; p + 1];
        let mut full = true;
        let all: Vec<usize> = (0..p).collect();
        for _ in 0..max_sweeps {
            self.inner_sweeps += 1;
            let active: Vec<usize>;
            let coords: &[usize] = if full {
                &all
            } else {
                active = (0..p)
                    .filter(|&j| self.beta[[k, j]] + delta[j] != 0.0)
                    .collect();
                &active
            };
            let mut max_change = 0.0_f64;
            let update = |st: &mut Self, bm: &mut BlockModel, j: usize, delta: &mut Vec<f64>, hd: &mut Vec<f64>| {
                let h = bm.diag[j];
                if !(h > 0.0 && h.is_finite()) {
                    if j < p {
                        st.skipped[k * p + j] = true;
                    }
                    return 0.0;
                }
                let (current, penalty) = if j < p {
                    (st.beta[[k, j]] + delta[j], st.lambda)
                } else {
                    (st.intercepts.as_ref().unwrap()[k] + delta[j], 0.0)
                };
                let a = bm.neg_grad[j] - hd[j] + h * current;
                let new = shrink(a, penalty) / h;
                let step = new - current;
                if step != 0.0 {
                    st.ensure_column(bm, j);
                    let col = bm.columns[j].as_ref().unwrap();
                    for (v, c) in hd.iter_mut().zip(col) {
                        *v += step * c;
                    }
                    delta[j] += step;
                }
                step.abs()
            };
            if has_b0 {
                max_change = max_change.max(update(self, bm, p, &mut delta, &mut hd));
            }
            for &j in coords {
                max_change = max_change.max(update(self, bm, j, &mut delta, &mut hd));
            }
            if max_change < tol {
                if full {
                    break;
                }
                full = true;
            } else {
                full = false;
            }
        }
        delta
    }

    /// Linear-predictor change of class `k` for step `delta`.
    fn eta_step(&self, delta: &[f64]) -> Vec<f64> {
        let p = self.p();
        let mut d = vec![delta[p]; self.n()];
        for (j, &dj) in delta[..p].iter().enumerate() {
            if dj != 0.0 {
                for (v, x) in d.iter_mut().zip(self.design.xt.row(j)) {
                    *v += dj * x;
                }
            }
        }
        d
    }

    /// Objective after moving class `k` by `t·delta`, without committing.
    fn trial_objective(&self, k: usize, delta: &[f64], deta: &[f64], t: f64) -> f64 {
        let data = self.design.data;
        let mut eta = vec![0.0; self.km1];
        let mut loss = 0.0;
        for i in 0..self.n() {
            eta.copy_from_slice(self.eta.row(i).as_slice().unwrap());
            eta[k] += t * deta[i];
            let y = data.class_of(i);
            let own = if y < self.km1 { eta[y] } else { 0.0 };
            loss += model::log_partition(&eta) - own;
        }
        let p = self.p();
        let mut pen = self.penalty();
        for j in 0..p {
            let old = self.beta[[k, j]];
            pen += self.lambda * ((old + t * delta[j]).abs() - old.abs());
        }
        loss / self.n() as f64 + pen
    }

    fn commit(&mut self, k: usize, delta: &[f64], deta: &[f64], t: f64) -> f64 {
        let p = self.p();
        let mut change = 0.0_f64;
        for j in 0..p {
            if delta[j] != 0.0 {
                self.beta[[k, j]] += t * delta[j];
                change = change.max((t * delta[j]).abs());
            }
        }
        if let Some(b0) = self.intercepts.as_mut() {
            b0[k] += t * delta[p];
            change = change.max((t * delta[p]).abs());
        }
        for i in 0..self.n() {
            if deta[i] != 0.0 {
                self.eta[[i, k]] += t * deta[i];
                self.refresh_row(i);
            }
        }
        // coefficients that should land on zero exactly
        for j in 0..p {
            if delta[j] != 0.0 && (self.beta[[k, j]]).abs() < 1e-300 {
                self.beta[[k, j]] = 0.0;
            }
        }
        change
    }

    /// One quadratic-model update of class `k`. Returns the largest
    /// coefficient change and whether the fallback weighting was used.
    fn block_update(&mut self, k: usize, mode: Weighting, opts: &SolverOptions) -> (f64, bool) {
        let before = self.objective();
        let inner_cap = 10 * opts.max_sweeps;
        let mut bm = self.block_model(k, mode);
        let delta = self.solve_block(k, &mut bm, opts.tol * 0.1, inner_cap);
        let deta = self.eta_step(&delta);
        let full = self.trial_objective(k, &delta, &deta, 1.0);
        if mode == Weighting::Posterior && full <= before + 1e-10 * before.abs().max(1.0) {
            return (self.commit(k, &delta, &deta, 1.0), false);
        }
        let fallback = mode == Weighting::Posterior;
        let (delta, deta) = if fallback {
            debug!("posterior-weight step raised objective {before:.12e} -> {full:.12e}");
            let mut bm = self.block_model(k, Weighting::Curvature);
            let d = self.solve_block(k, &mut bm, opts.tol * 0.1, inner_cap);
            let e = self.eta_step(&d);
            (d, e)
        } else {
            (delta, deta)
        };
        let mut t = 1.0;
        for _ in 0..60 {
            if self.trial_objective(k, &delta, &deta, t) <= before {
                return (self.commit(k, &delta, &deta, t), fallback);
            }
            t *= 0.5;
        }
        (0.0, fallback)
    }

    /// Quadratic model of the loss in every coordinate, indexed `k·(p+1) + j`
    /// with `j = p` the intercept.
    fn joint_model(&self) -> JointModel {
        let (n, p, km1) = (self.n(), self.p(), self.km1);
        let nf = n as f64;
        let mut weights = Array2::zeros((km1 * km1, n));
        for i in 0..n {
            for k in 0..km1 {
                let pk = self.probs[[i, k]];
                for l in 0..km1 {
                    weights[[k * km1 + l, i]] = if k == l {
                        pk * (1.0 - pk) + 1e-5
                    } else {
                        -pk * self.probs[[i, l]]
                    };
                }
            }
        }
        let zt = &self.design.zt;
        let mut diag = Vec::with_capacity(km1 * (p + 1));
        for k in 0..km1 {
            let w = weights.row(k * km1 + k);
            diag.extend(
                zt.outer_iter()
                    .map(|zj| zj.iter().zip(w).map(|(z, w)| w * z * z).sum::<f64>() / nf),
            );
        }
        let mut jm = JointModel {
            weights,
            neg_grad: self.joint_neg_grad(),
            eta_built: self.eta.clone(),
            diag,
            columns: vec![None; km1 * (p + 1)],
        };
        // Hessian columns of the current support, one matrix product per class pair
        for k in 0..km1 {
            let mut active: Vec<usize> = (0..p).filter(|&j| self.beta[[k, j]] != 0.0).collect();
            if self.intercepts.is_some() {
                active.push(p);
            }
            if active.len() < 2 {
                continue;
            }
            let rows = zt.select(Axis(0), &active);
            let mut cols = vec![Vec::with_capacity(km1 * (p + 1)); active.len()];
            for l in 0..km1 {
                let mut weighted = rows.clone();
                let w = jm.weights.row(k * km1 + l);
                for mut row in weighted.outer_iter_mut() {
                    row *= &w;
                }
                let block = weighted.dot(&self.design.z);
                for (a, col) in cols.iter_mut().enumerate() {
                    col.extend(block.row(a).iter().map(|v| v / nf));
                }
            }
            for (&j, col) in active.iter().zip(cols) {
                jm.columns[k * (p + 1) + j] = Some(col);
            }
        }
        jm
    }

    fn joint_neg_grad(&self) -> Vec<f64> {
        let nf = self.n() as f64;
        let mut neg_grad = Vec::with_capacity(self.km1 * (self.p() + 1));
        for k in 0..self.km1 {
            let resid = &self.design.onehot.column(k) - &self.probs.column(k);
            neg_grad.extend(self.design.zt.dot(&resid).iter().map(|g| g / nf));
        }
        neg_grad
    }

    fn ensure_joint_column(&self, jm: &mut JointModel, c: usize) {
        if jm.columns[c].is_some() {
            return;
        }
        let (p, km1) = (self.p(), self.km1);
        let nf = self.n() as f64;
        let (k, j) = (c / (p + 1), c % (p + 1));
        let zj = self.design.zt.row(j);
        let mut col = Vec::with_capacity(km1 * (p + 1));
        for l in 0..km1 {
            let wz = &zj * &jm.weights.row(k * km1 + l);
            col.extend(self.design.zt.dot(&wz).iter().map(|v| v / nf));
        }
        jm.columns[c] = Some(col);
    }

    /// Coordinate descent on the penalized joint quadratic model. Returns the
    /// step as a `(K-1) × (p+1)` matrix.
    fn solve_joint(&mut self, jm: &mut JointModel, tol: f64, max_sweeps: usize) -> Array2<f64> {
        let (p, km1) = (self.p(), self.km1);
        let stride = p + 1;
        let mut delta = vec![0.0; km1 * stride];
        let mut hd = vec![0.0; km1 * stride];
        let b0 = self.intercepts.is_some();
        let coord_list = |only_active: bool, st: &Self, delta: &[f64]| -> Vec<usize> {
            let mut out = Vec::new();
            for k in 0..km1 {
                if b0 {
                    out.push(k * stride + p);
                }
                for j in 0..p {
                    if !only_active || st.beta[[k, j]] + delta[k * stride + j] != 0.0 {
                        out.push(k * stride + j);
                    }
                }
            }
            out
        };
        let all = coord_list(false, self, &delta);
        let mut full = true;
        for _ in 0..max_sweeps {
            self.inner_sweeps += 1;
            let active;
            let coords: &[usize] = if full {
                &all
            } else {
                active = coord_list(true, self, &delta);
                &active
            };
            let mut max_change = 0.0_f64;
            for &c in coords {
                let h = jm.diag[c];
                let (k, j) = (c / stride, c % stride);
                if !(h > 0.0 && h.is_finite()) {
                    if j < p {
                        self.skipped[k * p + j] = true;
                    }
                    continue;
                }
                let (current, penalty) = if j < p {
                    (self.beta[[k, j]] + delta[c], self.lambda)
                } else {
                    (self.intercepts.as_ref().unwrap()[k] + delta[c], 0.0)
                };
                let a = jm.neg_grad[c] - hd[c] + h * current;
                let step = shrink(a, penalty) / h - current;
                if step != 0.0 {
                    self.ensure_joint_column(jm, c);
                    let col = jm.columns[c].as_ref().unwrap();
                    for (v, h) in hd.iter_mut().zip(col) {
                        *v += step * h;
                    }
                    delta[c] += step;
                    max_change = max_change.max(step.abs());
                }
            }
            if max_change < tol {
                if full {
                    break;
                }
                full = true;
            } else {
                full = false;
            }
        }
        Array2::from_shape_vec((km1, stride), delta).unwrap()
    }

    fn joint_trial(&self, delta: &Array2<f64>, deta: &Array2<f64>, t: f64) -> f64 {
        let data = self.design.data;
        let mut eta = vec![0.0; self.km1];
        let mut loss = 0.0;
        for i in 0..self.n() {
            for (k, e) in eta.iter_mut().enumerate() {
                *e = self.eta[[i, k]] + t * deta[[i, k]];
            }
            let y = data.class_of(i);
            let own = if y < self.km1 { eta[y] } else { 0.0 };
            loss += model::log_partition(&eta) - own;
        }
        let p = self.p();
        let mut pen = 0.0;
        for k in 0..self.km1 {
            for j in 0..p {
                pen += (self.beta[[k, j]] + t * delta[[k, j]]).abs();
            }
        }
        loss / self.n() as f64 + self.lambda * pen
    }

    /// One damped proximal Newton step on all classes. Returns the largest
    /// coefficient change.
    fn newton_update(&mut self, opts: &SolverOptions, inner_tol: f64) -> f64 {
        let before = self.objective();
        // the Hessian is rebuilt only once the linear predictors have drifted
        let mut jm = match self.hessian.take() {
            Some(mut jm) if max_abs_diff(&jm.eta_built, &self.eta) < HESSIAN_DRIFT => {
                jm.neg_grad = self.joint_neg_grad();
                jm
            }
            _ => self.joint_model(),
        };
        let delta = self.solve_joint(&mut jm, inner_tol, 10 * opts.max_sweeps);

        if delta.iter().all(|d| *d == 0.0) {
            return 0.0;
        }
        let deta = self.design.z.dot(&delta.t());
        let p = self.p();
        let mut t = 1.0;
        for _ in 0..60 {
            if self.joint_trial(&delta, &deta, t) <= before {
                if t == 1.0 {
                    self.hessian = Some(jm);
                }
                let mut change = 0.0_f64;
                for k in 0..self.km1 {
                    for j in 0..p {
                        if delta[[k, j]] != 0.0 {
                            self.beta[[k, j]] += t * delta[[k, j]];
                            change = change.max((t * delta[[k, j]]).abs());
                        }
                    }
                    if let Some(b0) = self.intercepts.as_mut() {
                        b0[k] += t * delta[[k, p]];
                        change = change.max((t * delta[[k, p]]).abs());
                    }
                }
                for i in 0..self.n() {
                    for k in 0..self.km1 {
                        self.eta[[i, k]] += t * deta[[i, k]];
                    }
                    self.refresh_row(i);
                }
                return change;
            }
            t *= 0.5;
        }
        0.0
    }

    fn coefficients(&self) -> CoefficientSet {
        CoefficientSet::new(
            self.beta.clone(),
            self.intercepts.as_ref().map(|b| Array1::from_vec(b.clone())),
        )
        .expect("coordinate descent produced non-finite coefficients")
    }

    fn kkt(&self) -> f64 {
        let data = self.design.data;
        let g = model::score_from_probs(data, &self.probs);
        let beta = self.coefficients();
        let mut worst = kkt_from_score(g.view(), &beta, self.lambda);
        if self.intercepts.is_some() {
            for k in 0..self.km1 {
                let g0: f64 = (0..self.n())
                    .map(|i| self.design.onehot[[i, k]] - self.probs[[i, k]])
                    .sum::<f64>()
                    / self.n() as f64;
                worst = worst.max(g0.abs());
            }
        }
        worst
    }
}

fn run_cd(design: &Design, lambda: f64, init: &CoefficientSet, opts: &SolverOptions) -> FitResult {
    run_cd_cached(design, lambda, init, opts, &mut None)
}

/// `run_cd` that reuses, and hands back, the joint Hessian of a neighbouring fit.
fn run_cd_cached(
    design: &Design,
    lambda: f64,
    init: &CoefficientSet,
    opts: &SolverOptions,
    cache: &mut Option<JointModel>,
) -> FitResult {
    let mut st = CdState::new(design, lambda, init);
    st.hessian = cache.take();
    let mut fallback_sweeps = 0;
    let mut converged = false;
    let mut obj = st.objective();

    // inner accuracy of a Newton step tracks the size of the previous one
    let mut inner_tol = 1e-3_f64.max(opts.tol * 0.1);
    for _outer in 0..opts.max_sweeps {
        let obj_start = obj;
        let mut first_change = 0.0_f64;
        let mut exact = true;
        match opts.algorithm {
            Algorithm::ProximalNewton => {
                first_change = st.newton_update(opts, inner_tol);
                exact = inner_tol <= opts.tol * 0.1;
                inner_tol = (1e-3 * first_change).clamp(opts.tol * 0.1, inner_tol);
            }
            Algorithm::ClassCyclic(weighting) => {
                for k in 0..st.km1 {
                    for inner in 0..opts.max_sweeps {
                        let (change, fell_back) = st.block_update(k, weighting, opts);
                        if fell_back {
                            fallback_sweeps += 1;
                        }
                        if inner == 0 {
                            first_change = first_change.max(change);
                        }
                        if change < opts.tol {
                            break;
                        }
                    }
                }
            }
        }
        obj = st.objective();
        let rel = (obj_start - obj).abs() / obj.abs().max(1.0);
        if exact && first_change < opts.tol && rel < 1e-10 && st.kkt() <= opts.kkt_tol {
            converged = true;
            break;
        }
    }

    let kkt_residual = st.kkt();
    *cache = st.hessian.take();
    if !converged {
        warn!(
            "coordinate descent at lambda={lambda:.4e} stopped after {} sweeps (kkt {kkt_residual:.2e})",
            st.inner_sweeps
        );
    }
    let skipped = st
        .skipped
        .iter()
        .enumerate()
        .filter(|(_, s)| **s)
        .map(|(j, _)| j)
        .collect();
    FitResult {
        beta: st.coefficients(),
        lambda,
        objective: obj,
        n_sweeps: st.inner_sweeps,
        converged,
        fallback_sweeps,
        skipped,
        kkt_residual,
    }
}

/// Per-feature affine map used by optional standardization.
struct Scaling {
    center: Vec<f64>,
    scale: Vec<f64>,
}

impl Scaling {
    fn from_data(data: &Dataset, center: bool) -> Self {
        let x = data.features();
        let n = data.n() as f64;
        let mean: Vec<f64> = x.mean_axis(Axis(0)).unwrap().to_vec();
        let scale = (0..data.p())
            .map(|m| {
                let var = x.column(m).iter().map(|v| (v - mean[m]).powi(2)).sum::<f64>() / n;
                if var > 0.0 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        let center = if center { mean } else { vec![0.0; data.p()] };
        Self { center, scale }
    }

    fn transform(&self, data: &Dataset) -> Dataset {
        let mut x = data.features().clone();
        for (m, mut col) in x.axis_iter_mut(Axis(1)).enumerate() {
            col.mapv_inplace(|v| (v - self.center[m]) / self.scale[m]);
        }
        Dataset::new(x, data.labels().to_vec(), data.num_classes()).unwrap()
    }

    fn to_scaled(&self, beta: &CoefficientSet) -> CoefficientSet {
        let mut c = beta.contrasts().clone();
        let mut b0 = beta.intercepts().cloned();
        for k in 0..c.nrows() {
            for m in 0..c.ncols() {
                if let Some(b) = b0.as_mut() {
                    b[k] += c[[k, m]] * self.center[m];
                }
                c[[k, m]] *= self.scale[m];
            }
        }
        CoefficientSet::new(c, b0).unwrap()
    }

    fn to_original(&self, beta: &CoefficientSet) -> CoefficientSet {
        let mut c = beta.contrasts().clone();
        let mut b0 = beta.intercepts().cloned();
        for k in 0..c.nrows() {
            for m in 0..c.ncols() {
                c[[k, m]] /= self.scale[m];
                if let Some(b) = b0.as_mut() {
                    b[k] -= c[[k, m]] * self.center[m];
                }
            }
        }
        CoefficientSet::new(c, b0).unwrap()
    }
}

fn prepare_init(data: &Dataset, init: &CoefficientSet, fit_intercept: bool) -> Result<CoefficientSet> {
    if init.num_classes() != data.num_classes() || init.p() != data.p() {
        return argument(format!(
            "initial coefficients are for K={}, p={} but data has K={}, p={}",
            init.num_classes(),
            init.p(),
            data.num_classes(),
            data.p()
        ));
    }
    let mut init = init.clone();
    match (fit_intercept, init.has_intercepts()) {
        (true, false) => init.set_intercepts(Some(frequency_intercepts(data))),
        (false, true) => init.set_intercepts(None),
        _ => {}
    }
    Ok(init)
}

/// Intercept-only MLE: `log(n_k / n_K)`.
pub(crate) fn frequency_intercepts(data: &Dataset) -> Array1<f64> {
    let counts = data.class_counts();
    let reference = counts[counts.len() - 1].max(1) as f64;
    Array1::from_iter(
        counts[..counts.len() - 1]
            .iter()
            .map(|&c| (c.max(1) as f64 / reference).ln()),
    )
}

fn validate_fit_inputs(data: &Dataset, lambda: f64) -> Result<()> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return argument(format!("lambda must be nonnegative, got {lambda}"));
    }
    data.require_all_classes()
}

/// Solves the penalized problem at one `lambda`, starting from `init`.
pub fn fit_single(
    data: &Dataset,
    lambda: f64,
    init: &CoefficientSet,
    opts: &SolverOptions,
) -> Result<FitResult> {
    validate_fit_inputs(data, lambda)?;
    let init = prepare_init(data, init, opts.fit_intercept)?;
    if opts.standardize {
        let scaling = Scaling::from_data(data, opts.fit_intercept);
        let scaled = scaling.transform(data);
        let design = Design::new(&scaled);
        let mut fit = run_cd(&design, lambda, &scaling.to_scaled(&init), opts);
        fit.beta = scaling.to_original(&fit.beta);
        return Ok(fit);
    }
    let design = Design::new(data);
    Ok(run_cd(&design, lambda, &init, opts))
}

fn zero_init(data: &Dataset) -> CoefficientSet {
    CoefficientSet::zeros(data.num_classes(), data.p())
}

/// Fits every value of `path` in order, each warm-started from the previous solution.
pub fn fit_path(data: &Dataset, path: &LambdaPath, opts: &SolverOptions) -> Result<Vec<FitResult>> {
    validate_fit_inputs(data, path.values()[0])?;
    let init = prepare_init(data, &zero_init(data), opts.fit_intercept)?;
    let scaling = opts
        .standardize
        .then(|| Scaling::from_data(data, opts.fit_intercept));
    let scaled;
    let work = match &scaling {
        Some(s) => {
            scaled = s.transform(data);
            &scaled
        }
        None => data,
    };
    let design = Design::new(work);
    let mut current = match &scaling {
        Some(s) => s.to_scaled(&init),
        None => init,
    };
    let mut out = Vec::with_capacity(path.len());
    let mut cache = None;
    for &lambda in path.values() {
        let fit = run_cd_cached(&design, lambda, &current, opts, &mut cache);
        current = fit.beta.clone();
        out.push(fit);
    }
    if let Some(s) = &scaling {
        for fit in &mut out {
            fit.beta = s.to_original(&fit.beta);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct CvResult {
    pub lambda_grid: LambdaPath,
    pub mean_cv_deviance: Vec<f64>,
    pub se_cv_deviance: Vec<f64>,
    pub lambda_min: f64,
    pub lambda_min_index: usize,
    /// Zero-based fold of every row.
    pub fold_assignment: Vec<usize>,
}

/// Mean held-out deviance `-2 log p_{y}` with probabilities clipped to `[1e-10, 1-1e-10]`.
pub fn heldout_deviance(data: &Dataset, beta: &CoefficientSet) -> Result<f64> {
    if beta.num_classes() != data.num_classes() || beta.p() != data.p() {
        return argument("coefficient and data dimensions disagree");
    }
    let probs = model::probability_matrix(data.features().view(), beta);
    let total: f64 = (0..data.n())
        .map(|i| -2.0 * probs[[i, data.class_of(i)]].clamp(1e-10, 1.0 - 1e-10).ln())
        .sum();
    Ok(total / data.n() as f64)
}

fn train_has_all_classes(data: &Dataset, folds: &[usize], n_folds: usize) -> bool {
    let k = data.num_classes();
    let mut per_fold = vec![vec![0usize; k]; n_folds];
    for (i, &f) in folds.iter().enumerate() {
        per_fold[f][data.class_of(i)] += 1;
    }
    let total = data.class_counts();
    per_fold
        .iter()
        .all(|counts| counts.iter().zip(&total).all(|(c, t)| t - c > 0))
}

/// Class-stratified fold labels: each class is shuffled and dealt round-robin.
pub fn stratified_folds(data: &Dataset, n_folds: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); data.num_classes()];
    for i in 0..data.n() {
        by_class[data.class_of(i)].push(i);
    }
    let mut folds = vec![0; data.n()];
    let mut pos = 0;
    for members in &mut by_class {
        members.shuffle(rng);
        for &i in members.iter() {
            folds[i] = pos % n_folds;
            pos += 1;
        }
    }
    folds
}

/// Stratified `n_folds` cross-validation of held-out deviance over `path`.
pub fn cross_validate(
    data: &Dataset,
    n_folds: usize,
    path: &LambdaPath,
    seed: u64,
    opts: &SolverOptions,
) -> Result<CvResult> {
    if n_folds < 2 || n_folds > data.n() {
        return argument(format!("need 2 <= folds <= n, got {n_folds}"));
    }
    data.require_all_classes()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..20 {
        let folds = stratified_folds(data, n_folds, &mut rng);
        if train_has_all_classes(data, &folds, n_folds) {
            return cross_validate_with_folds(data, &folds, path, opts);
        }
    }
    Err(Error::Data(format!(
        "could not draw {n_folds} folds whose training parts contain every class"
    )))
}

/// Cross-validation over a caller-supplied fold assignment.
pub fn cross_validate_with_folds(
    data: &Dataset,
    folds: &[usize],
    path: &LambdaPath,
    opts: &SolverOptions,
) -> Result<CvResult> {
    if folds.len() != data.n() {
        return argument("fold assignment length differs from n");
    }
    let n_folds = folds.iter().copied().max().map_or(0, |m| m + 1);
    if n_folds < 2 {
        return argument("need at least two folds");
    }
    let per_fold: Vec<Vec<f64>> = (0..n_folds)
        .into_par_iter()
        .map(|f| -> Result<Vec<f64>> {
            let (train, test): (Vec<usize>, Vec<usize>) =
                (0..data.n()).partition(|&i| folds[i] != f);
            if test.is_empty() {
                return Err(Error::Data(format!("fold {f} is empty")));
            }
            let train = data.subset(&train);
            let test = data.subset(&test);
            let fits = fit_path(&train, path, opts)?;
            fits.iter().map(|fit| heldout_deviance(&test, &fit.beta)).collect()
        })
        .collect::<Result<_>>()?;

    let nf = n_folds as f64;
    let mut mean = vec![0.0; path.len()];
    let mut se = vec![0.0; path.len()];
    for l in 0..path.len() {
        let m = per_fold.iter().map(|d| d[l]).sum::<f64>() / nf;
        let var = per_fold.iter().map(|d| (d[l] - m).powi(2)).sum::<f64>() / (nf - 1.0);
        mean[l] = m;
        se[l] = (var / nf).sqrt();
    }
    // path is decreasing, so a strict comparison keeps the largest lambda on ties
    let mut best = 0;
    for l in 1..mean.len() {
        if mean[l] < mean[best] {
            best = l;
        }
    }
    Ok(CvResult {
        lambda_grid: path.clone(),
        lambda_min: path.values()[best],
        lambda_min_index: best,
        mean_cv_deviance: mean,
        se_cv_deviance: se,
        fold_assignment: folds.to_vec(),
    })
}

/// Cross-validates the default path and returns the full-data fit at `lambda_min`.
pub fn fit_cv(
    data: &Dataset,
    n_folds: usize,
    seed: u64,
    opts: &SolverOptions,
) -> Result<(CvResult, FitResult)> {
    let path = LambdaPath::for_data(data, opts)?;
    let cv = cross_validate(data, n_folds, &path, seed, opts)?;
    let prefix = LambdaPath::new(path.values()[..=cv.lambda_min_index].to_vec())?;
    let fit = fit_path(data, &prefix, opts)?
        .pop()
        .expect("path prefix is nonempty");
    Ok((cv, fit))
}

/// Predicted class in `1..=K`; ties go to the smaller class.
pub fn predict(beta: &CoefficientSet, x: ArrayView1<f64>) -> Result<usize> {
    Ok(posterior_probs(x, beta)?.argmax() + 1)
}

pub fn misclassification_rate(beta: &CoefficientSet, data: &Dataset) -> Result<f64> {
    if beta.p() != data.p() || beta.num_classes() != data.num_classes() {
        return argument("coefficient and data dimensions disagree");
    }
    let mut wrong = 0usize;
    for (i, row) in data.features().outer_iter().enumerate() {
        if predict(beta, row)? != data.labels()[i] {
            wrong += 1;
        }
    }
    Ok(wrong as f64 / data.n() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn soft_threshold_cases() {
        assert_eq!(soft_threshold(2.0, 1.0).unwrap(), 1.0);
        assert_eq!(soft_threshold(-0.3, 0.5).unwrap(), 0.0);
        assert_eq!(soft_threshold(-2.5, 1.0).unwrap(), -1.5);
        assert!(soft_threshold(1.0, -0.1).is_err());
    }

    #[test]
    fn lambda_path_validation() {
        assert!(LambdaPath::new(vec![1.0, 1.0]).is_err());
        assert!(LambdaPath::new(vec![1.0, -0.5]).is_err());
        assert!(LambdaPath::new(vec![]).is_err());
        let p = LambdaPath::log_spaced(2.0, 0.01, 100).unwrap();
        assert_eq!(p.len(), 100);
        assert!((p.values()[99] - 0.02).abs() < 1e-12);
    }

    #[test]
    fn lambda_max_of_zero_features_is_zero() {
        let d = Dataset::new(Array2::zeros((4, 2)), vec![1, 2, 1, 2], 2).unwrap();
        assert_eq!(lambda_max(&d, false), 0.0);
        assert!(LambdaPath::for_data(&d, &SolverOptions::default()).is_err());
    }

    #[test]
    fn lambda_max_balanced_aligned_feature() {
        let d = Dataset::new(array![[1.0], [1.0], [-1.0], [-1.0]], vec![1, 1, 2, 2], 2).unwrap();
        assert!((lambda_max(&d, false) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn fit_at_lambda_max_is_zero() {
        let d = Dataset::new(
            array![[1.0, 0.2], [0.5, -1.0], [-1.0, 0.3], [-0.4, 0.9], [0.1, 0.1], [2.0, -0.5]],
            vec![1, 2, 3, 1, 2, 3],
            3,
        )
        .unwrap();
        let lmax = lambda_max(&d, false);
        let init = CoefficientSet::new(array![[0.5, -0.5], [0.3, 0.1]], None).unwrap();
        let fit = fit_single(&d, lmax, &init, &SolverOptions::default()).unwrap();
        assert!(fit.converged);
        assert!(fit.beta.contrasts().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn missing_class_is_data_error() {
        let d = Dataset::new(array![[1.0], [2.0]], vec![1, 1], 2).unwrap();
        let r = fit_single(&d, 0.1, &CoefficientSet::zeros(2, 1), &SolverOptions::default());
        assert!(matches!(r, Err(Error::Data(_))));
    }

    #[test]
    fn zero_column_is_skipped_not_divided() {
        let d = Dataset::new(
            array![[1.0, 0.0], [-0.5, 0.0], [0.3, 0.0], [-1.2, 0.0]],
            vec![1, 2, 1, 2],
            2,
        )
        .unwrap();
        let fit = fit_single(&d, 0.01, &CoefficientSet::zeros(2, 2), &SolverOptions::default())
            .unwrap();
        assert!(fit.skipped.contains(&1));
        assert_eq!(fit.beta.contrasts()[[0, 1]], 0.0);
        assert!(fit.beta.contrasts()[[0, 0]].is_finite());
    }

    #[test]
    fn predict_ties_and_sign() {
        let zero = CoefficientSet::zeros(3, 2);
        assert_eq!(predict(&zero, array![1.0, 2.0].view()).unwrap(), 1);
        let b = CoefficientSet::new(array![[1.0]], None).unwrap();
        assert_eq!(predict(&b, array![0.5].view()).unwrap(), 1);
        assert_eq!(predict(&b, array![-0.5].view()).unwrap(), 2);
    }

    #[test]
    fn misclassification_counts_errors() {
        let b = CoefficientSet::new(array![[1.0]], None).unwrap();
        let d = Dataset::new(array![[1.0], [2.0], [-1.0], [-3.0]], vec![1, 1, 2, 1], 2).unwrap();
        assert_eq!(misclassification_rate(&b, &d).unwrap(), 0.25);
    }

    #[test]
    fn stratified_folds_balance_classes() {
        let labels: Vec<usize> = (0..30).map(|i| i % 3 + 1).collect();
        let d = Dataset::new(Array2::zeros((30, 1)), labels, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let folds = stratified_folds(&d, 5, &mut rng);
        for f in 0..5 {
            let members: Vec<usize> = (0..30).filter(|&i| folds[i] == f).collect();
            assert_eq!(members.len(), 6);
        }
        assert!(train_has_all_classes(&d, &folds, 5));
    }
}
