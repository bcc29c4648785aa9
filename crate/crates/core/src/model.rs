//! Multinomial model with a reference class: data container, coefficient
//! layout, likelihood, score and curvature.
//!
//! Class `K` is the reference class and its coefficient row is pinned at
//! zero, so a model with `K` classes and `p` features carries `(K-1)·p`
//! contrast coefficients. The stacked coordinate order is class-major:
//! coordinate `k·p + m` (0-based) is contrast `k`, feature `m`.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{argument, Error, Result};

/// Feature matrix plus integer class labels in `1..=K`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Array2<f64>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let (n, p) = features.dim();
        if n == 0 || p == 0 {
            return argument(format!("dataset needs n >= 1 and p >= 1, got n={n}, p={p}"));
        }
        if num_classes < 2 {
            return argument(format!("need at least two classes, got {num_classes}"));
        }
        if labels.len() != n {
            return argument(format!("{} labels for {n} rows", labels.len()));
        }
        if let Some((i, &y)) = labels
            .iter()
            .enumerate()
            .find(|(_, &y)| y == 0 || y > num_classes)
        {
            return argument(format!("label {y} at row {i} outside 1..={num_classes}"));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
        })
    }

    /// Builds a dataset whose class count is the largest observed label.
    pub fn from_labels(features: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        let k = labels.iter().copied().max().unwrap_or(0);
        Self::new(features, labels, k)
    }

    pub fn n(&self) -> usize {
        self.features.nrows()
    }

    pub fn p(&self) -> usize {
        self.features.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    /// Labels in `1..=K`.
    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Zero-based class of row `i`.
    #[inline]
    pub fn class_of(&self, i: usize) -> usize {
        self.labels[i] - 1
    }

    /// `1(y_i = k)` for a zero-based class `k`.
    #[inline]
    pub fn indicator(&self, i: usize, k: usize) -> f64 {
        if self.labels[i] == k + 1 {
            1.0
        } else {
            0.0
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y - 1] += 1;
        }
        counts
    }

    /// Fails when some class in `1..=K` has no observation.
    pub fn require_all_classes(&self) -> Result<()> {
        let counts = self.class_counts();
        match counts.iter().position(|&c| c == 0) {
            Some(k) => Err(Error::Data(format!(
                "class {} has no observations (n = {})",
                k + 1,
                self.n()
            ))),
            None => Ok(()),
        }
    }

    /// Rows `idx` (repeats allowed), keeping the class count.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select(Axis(0), idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }
}

/// Contrast coefficients `β^{(1)}, …, β^{(K-1)}` plus optional unpenalized intercepts.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientSet {
    contrasts: Array2<f64>,
    intercepts: Option<Array1<f64>>,
}

impl CoefficientSet {
    pub fn new(contrasts: Array2<f64>, intercepts: Option<Array1<f64>>) -> Result<Self> {
        if contrasts.nrows() == 0 || contrasts.ncols() == 0 {
            return argument("contrast matrix must be at least 1x1");
        }
        if let Some(b0) = &intercepts {
            if b0.len() != contrasts.nrows() {
                return argument(format!(
                    "{} intercepts for {} contrasts",
                    b0.len(),
                    contrasts.nrows()
                ));
            }
            if b0.iter().any(|v| !v.is_finite()) {
                return argument("intercepts must be finite");
            }
        }
        if contrasts.iter().any(|v| !v.is_finite()) {
            return argument("contrast coefficients must be finite");
        }
        Ok(Self {
            contrasts,
            intercepts,
        })
    }

    pub fn zeros(num_classes: usize, p: usize) -> Self {
        assert!(num_classes >= 2 && p >= 1);
        Self {
            contrasts: Array2::zeros((num_classes - 1, p)),
            intercepts: None,
        }
    }

    pub fn zeros_with_intercepts(num_classes: usize, p: usize) -> Self {
        let mut b = Self::zeros(num_classes, p);
        b.intercepts = Some(Array1::zeros(num_classes - 1));
        b
    }

    /// Rebuilds from a stacked class-major vector of length `(K-1)·p`.
    pub fn from_stacked(
        num_classes: usize,
        p: usize,
        stacked: &[f64],
        intercepts: Option<Array1<f64>>,
    ) -> Result<Self> {
        if num_classes < 2 || stacked.len() != (num_classes - 1) * p {
            return argument(format!(
                "stacked length {} does not match (K-1)p = {}",
                stacked.len(),
                num_classes.saturating_sub(1) * p
            ));
        }
        let contrasts = Array2::from_shape_vec((num_classes - 1, p), stacked.to_vec())
            .map_err(|e| Error::Argument(e.to_string()))?;
        Self::new(contrasts, intercepts)
    }

    pub fn num_classes(&self) -> usize {
        self.contrasts.nrows() + 1
    }

    pub fn p(&self) -> usize {
        self.contrasts.ncols()
    }

    /// Length of the stacked inference vector, `(K-1)·p`.
    pub fn dim(&self) -> usize {
        self.contrasts.len()
    }

    pub fn contrasts(&self) -> &Array2<f64> {
        &self.contrasts
    }

    pub fn contrasts_mut(&mut self) -> &mut Array2<f64> {
        &mut self.contrasts
    }

    pub fn intercepts(&self) -> Option<&Array1<f64>> {
        self.intercepts.as_ref()
    }

    pub fn intercepts_mut(&mut self) -> Option<&mut Array1<f64>> {
        self.intercepts.as_mut()
    }

    pub fn has_intercepts(&self) -> bool {
        self.intercepts.is_some()
    }

    pub fn set_intercepts(&mut self, intercepts: Option<Array1<f64>>) {
        self.intercepts = intercepts;
    }

    pub fn stacked(&self) -> Array1<f64> {
        Array1::from_iter(self.contrasts.iter().copied())
    }

    /// Number of nonzero contrast entries.
    pub fn support_size(&self) -> usize {
        self.contrasts.iter().filter(|v| **v != 0.0).count()
    }

    fn check_dims(&self, num_classes: usize, p: usize) -> Result<()> {
        if self.num_classes() != num_classes || self.p() != p {
            return argument(format!(
                "coefficients are for K={}, p={} but data has K={num_classes}, p={p}",
                self.num_classes(),
                self.p()
            ));
        }
        Ok(())
    }

    /// `η_k = β^{(k)ᵀ}x (+ intercept)` for the `K-1` non-reference classes.
    pub(crate) fn eta_into(&self, x: ArrayView1<f64>, eta: &mut [f64]) {
        for (k, e) in eta.iter_mut().enumerate() {
            let mut v = self.contrasts.row(k).dot(&x);
            if let Some(b0) = &self.intercepts {
                v += b0[k];
            }
            *e = v;
        }
    }
}

/// Posterior class probabilities `p_1(x;β), …, p_K(x;β)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorVector {
    pub probs: Vec<f64>,
}

impl PosteriorVector {
    /// Zero-based index of the largest probability; ties go to the smallest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (k, &v) in self.probs.iter().enumerate().skip(1) {
            if v > self.probs[best] {
                best = k;
            }
        }
        best
    }
}

/// `log(1 + Σ_k exp(η_k))`, shifted by the maximum.
#[inline]
pub(crate) fn log_partition(eta: &[f64]) -> f64 {
    let m = eta.iter().copied().fold(0.0_f64, f64::max);
    let mut s = (-m).exp();
    for &e in eta {
        s += (e - m).exp();
    }
    m + s.max(1e-300).ln()
}

/// Softmax with the reference class appended as the last entry.
#[inline]
pub(crate) fn softmax_into(eta: &[f64], probs: &mut [f64]) {
    debug_assert_eq!(probs.len(), eta.len() + 1);
    let m = eta.iter().copied().fold(0.0_f64, f64::max);
    let last = eta.len();
    probs[last] = (-m).exp();
    let mut s = probs[last];
    for (k, &e) in eta.iter().enumerate() {
        probs[k] = (e - m).exp();
        s += probs[k];
    }
    for v in probs.iter_mut() {
        *v /= s;
    }
}

pub fn posterior_probs(x: ArrayView1<f64>, beta: &CoefficientSet) -> Result<PosteriorVector> {
    if x.len() != beta.p() {
        return argument(format!(
            "feature vector has length {} but coefficients expect {}",
            x.len(),
            beta.p()
        ));
    }
    let k = beta.num_classes();
    let mut eta = vec![0.0; k - 1];
    beta.eta_into(x, &mut eta);
    let mut probs = vec![0.0; k];
    softmax_into(&eta, &mut probs);
    Ok(PosteriorVector { probs })
}

fn check_data(data: &Dataset, beta: &CoefficientSet) -> Result<()> {
    beta.check_dims(data.num_classes(), data.p())
}

/// `n × (K-1)` matrix of linear predictors.
pub(crate) fn linear_predictors(x: ArrayView2<f64>, beta: &CoefficientSet) -> Array2<f64> {
    // the product may come back column-major; callers slice rows
    let mut eta = x.dot(&beta.contrasts.t()).as_standard_layout().into_owned();
    if let Some(b0) = &beta.intercepts {
        eta += &b0.view().insert_axis(Axis(0));
    }
    eta
}

/// `n × K` posterior matrix.
pub(crate) fn probability_matrix(x: ArrayView2<f64>, beta: &CoefficientSet) -> Array2<f64> {
    let eta = linear_predictors(x, beta);
    let (n, km1) = eta.dim();
    let mut probs = Array2::zeros((n, km1 + 1));
    let mut buf = vec![0.0; km1 + 1];
    for i in 0..n {
        softmax_into(eta.row(i).as_slice().unwrap(), &mut buf);
        probs.row_mut(i).assign(&ArrayView1::from(&buf[..]));
    }
    probs
}

/// Averaged negative log-likelihood `(1/n) L_n(β)`.
pub fn avg_neg_log_likelihood(data: &Dataset, beta: &CoefficientSet) -> Result<f64> {
    check_data(data, beta)?;
    let eta = linear_predictors(data.features().view(), beta);
    let km1 = data.num_classes() - 1;
    let mut total = 0.0;
    for (i, row) in eta.outer_iter().enumerate() {
        let row = row.as_slice().unwrap();
        let y = data.class_of(i);
        let own = if y < km1 { row[y] } else { 0.0 };
        total += log_partition(row) - own;
    }
    Ok(total / data.n() as f64)
}

/// Gradient of the averaged loss in stacked order; block `k` is
/// `(1/n) Σ_i (p_k(x_i;β) - y_i^{(k)}) x_i`. Intercepts are not part of it.
pub fn score(data: &Dataset, beta: &CoefficientSet) -> Result<Array1<f64>> {
    check_data(data, beta)?;
    let probs = probability_matrix(data.features().view(), beta);
    Ok(score_from_probs(data, &probs))
}

pub(crate) fn score_from_probs(data: &Dataset, probs: &Array2<f64>) -> Array1<f64> {
    let (n, p, km1) = (data.n(), data.p(), data.num_classes() - 1);
    let mut resid = Array2::zeros((n, km1));
    for i in 0..n {
        for k in 0..km1 {
            resid[[i, k]] = probs[[i, k]] - data.indicator(i, k);
        }
    }
    // (K-1) × p, row-major is exactly the stacked order
    let g = resid.t().dot(data.features()) / n as f64;
    debug_assert_eq!(g.len(), km1 * p);
    Array1::from_iter(g.iter().copied())
}

/// Per-sample Hessian `B(x;β)` of the negative log-likelihood.
pub fn hessian_block(x: ArrayView1<f64>, beta: &CoefficientSet) -> Result<Array2<f64>> {
    let post = posterior_probs(x, beta)?;
    let (km1, p) = (beta.num_classes() - 1, beta.p());
    let outer = outer(x);
    let mut b = Array2::zeros((km1 * p, km1 * p));
    for k in 0..km1 {
        for l in 0..km1 {
            let w = if k == l {
                post.probs[k] * (1.0 - post.probs[k])
            } else {
                -post.probs[k] * post.probs[l]
            };
            b.slice_mut(s![k * p..(k + 1) * p, l * p..(l + 1) * p])
                .assign(&(&outer * w));
        }
    }
    Ok(b)
}

fn outer(x: ArrayView1<f64>) -> Array2<f64> {
    let col = x.insert_axis(Axis(1));
    let row = x.insert_axis(Axis(0));
    col.dot(&row)
}

/// Empirical Hessian of the averaged loss, `(1/n) Σ_i B(x_i; β)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaHat {
    pub matrix: Array2<f64>,
    pub n: usize,
}

impl SigmaHat {
    pub fn new(matrix: Array2<f64>, n: usize) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() {
            return argument("sigma must be square");
        }
        Ok(Self { matrix, n })
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// Largest absolute asymmetry `|Σ_ij - Σ_ji|`.
    pub fn asymmetry(&self) -> f64 {
        let d = self.dim();
        let mut worst = 0.0_f64;
        for i in 0..d {
            for j in 0..i {
                worst = worst.max((self.matrix[[i, j]] - self.matrix[[j, i]]).abs());
            }
        }
        worst
    }

    /// Smallest eigenvalue of the symmetric part.
    pub fn min_eigenvalue(&self) -> f64 {
        let d = self.dim();
        let m = nalgebra::DMatrix::from_fn(d, d, |i, j| {
            0.5 * (self.matrix[[i, j]] + self.matrix[[j, i]])
        });
        m.symmetric_eigenvalues()
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    /// Symmetric within 1e-10 and PSD down to a -1e-8 eigenvalue.
    pub fn validate(&self) -> Result<()> {
        let asym = self.asymmetry();
        if asym > 1e-10 {
            return Err(Error::Inference(format!("sigma asymmetric by {asym:e}")));
        }
        let lo = self.min_eigenvalue();
        if lo < -1e-8 {
            return Err(Error::Inference(format!(
                "sigma not PSD: smallest eigenvalue {lo:e}"
            )));
        }
        Ok(())
    }

    /// `vᵀ Σ v`.
    pub fn quadratic_form(&self, v: ArrayView1<f64>) -> f64 {
        v.dot(&self.matrix.dot(&v))
    }
}

pub fn empirical_sigma(data: &Dataset, beta: &CoefficientSet) -> Result<SigmaHat> {
    check_data(data, beta)?;
    let probs = probability_matrix(data.features().view(), beta);
    let m = sigma_from_design(data.features().view(), &probs);
    SigmaHat::new(m, data.n())
}

/// `(1/n) Σ_i (diag(p_i) - p_i p_iᵀ) ⊗ z_i z_iᵀ` for an arbitrary design `z`,
/// restricted to the non-reference classes. Blocks are formed by weighted
/// Gram products in a fixed order, so the result is bit-stable.
pub(crate) fn sigma_from_design(design: ArrayView2<f64>, probs: &Array2<f64>) -> Array2<f64> {
    let (n, q) = design.dim();
    let km1 = probs.ncols() - 1;
    let d = km1 * q;
    let mut out = Array2::zeros((d, d));
    let mut weighted = Array2::zeros((n, q));
    for k in 0..km1 {
        for l in k..km1 {
            for i in 0..n {
                let w = if k == l {
                    probs[[i, k]] * (1.0 - probs[[i, k]])
                } else {
                    -probs[[i, k]] * probs[[i, l]]
                };
                weighted
                    .row_mut(i)
                    .zip_mut_with(&design.row(i), |a, &b| *a = w * b);
            }
            let mut block = weighted.t().dot(&design);
            block /= n as f64;
            if k == l {
                let sym = (&block + &block.t()) * 0.5;
                block = sym;
            }
            out.slice_mut(s![k * q..(k + 1) * q, l * q..(l + 1) * q])
                .assign(&block);
            if k != l {
                out.slice_mut(s![l * q..(l + 1) * q, k * q..(k + 1) * q])
                    .assign(&block.t());
            }
        }
    }
    out
}

/// Design with a trailing column of ones.
pub(crate) fn with_intercept_column(x: ArrayView2<f64>) -> Array2<f64> {
    let (n, p) = x.dim();
    let mut z = Array2::ones((n, p + 1));
    z.slice_mut(s![.., ..p]).assign(&x);
    z
}
