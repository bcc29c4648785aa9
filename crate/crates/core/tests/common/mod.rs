//! Independent reference implementations used by the integration and
//! acceptance tests. Nothing here calls into the solver or inference code.
#![allow(dead_code)]

pub mod suites;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sparsemn::Dataset;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Gaussian features and labels drawn from a random multinomial model with
/// every class present.
pub fn random_dataset(seed: u64, n: usize, p: usize, k: usize, signal: f64) -> Dataset {
    let mut r = rng(seed);
    loop {
        let x = Array2::from_shape_fn((n, p), |_| r.sample::<f64, _>(StandardNormal));
        let beta = Array2::from_shape_fn((k - 1, p), |_| signal * r.sample::<f64, _>(StandardNormal));
        let labels: Vec<usize> = (0..n)
            .map(|i| {
                let probs = softmax_ref(&eta_row(&x, &beta, None, i));
                let u: f64 = r.gen();
                let mut acc = 0.0;
                for (c, pc) in probs.iter().enumerate() {
                    acc += pc;
                    if u < acc {
                        return c + 1;
                    }
                }
                k
            })
            .collect();
        let mut seen = vec![false; k];
        labels.iter().for_each(|&y| seen[y - 1] = true);
        if seen.iter().all(|s| *s) {
            return Dataset::new(x, labels, k).unwrap();
        }
    }
}

fn eta_row(x: &Array2<f64>, beta: &Array2<f64>, b0: Option<&[f64]>, i: usize) -> Vec<f64> {
    (0..beta.nrows())
        .map(|c| {
            let lin: f64 = (0..x.ncols()).map(|m| x[[i, m]] * beta[[c, m]]).sum();
            lin + b0.map_or(0.0, |b| b[c])
        })
        .collect()
}

/// Class probabilities for contrast predictors `eta` (reference class last).
pub fn softmax_ref(eta: &[f64]) -> Vec<f64> {
    let top = eta.iter().copied().fold(0.0, f64::max);
    let mut e: Vec<f64> = eta.iter().map(|v| (v - top).exp()).collect();
    e.push((-top).exp());
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Averaged negative log-likelihood and its gradient with respect to the
/// contrasts (row-major `(K-1)×p`) and intercepts.
pub fn loss_and_grad(
    data: &Dataset,
    beta: &Array2<f64>,
    b0: Option<&[f64]>,
) -> (f64, Array2<f64>, Vec<f64>) {
    let x = data.features();
    let (n, p) = x.dim();
    let km1 = beta.nrows();
    let mut loss = 0.0;
    let mut g = Array2::zeros((km1, p));
    let mut g0 = vec![0.0; km1];
    for i in 0..n {
        let probs = softmax_ref(&eta_row(x, beta, b0, i));
        let y = data.labels()[i] - 1;
        loss -= probs[y].max(1e-300).ln();
        for c in 0..km1 {
            let r = probs[c] - f64::from(u8::from(y == c));
            g0[c] += r / n as f64;
            for m in 0..p {
                g[[c, m]] += r * x[[i, m]] / n as f64;
            }
        }
    }
    (loss / n as f64, g, g0)
}

pub fn objective(data: &Dataset, beta: &Array2<f64>, b0: Option<&[f64]>, lambda: f64) -> f64 {
    loss_and_grad(data, beta, b0).0 + lambda * beta.iter().map(|v| v.abs()).sum::<f64>()
}

fn soft(a: f64, t: f64) -> f64 {
    a.signum() * (a.abs() - t).max(0.0)
}

/// Accelerated proximal gradient with backtracking and adaptive restart for
/// the multinomial Lasso. Returns contrasts and (optional) intercepts.
pub fn prox_gradient(
    data: &Dataset,
    lambda: f64,
    intercept: bool,
    max_iter: usize,
) -> (Array2<f64>, Option<Vec<f64>>) {
    let km1 = data.num_classes() - 1;
    let p = data.p();
    let mut beta = Array2::<f64>::zeros((km1, p));
    let mut b0 = vec![0.0; km1];
    let mut yb = beta.clone();
    let mut y0 = b0.clone();
    let mut t: f64 = 1.0;
    let mut step = 1.0;
    let mut f_prev = f64::INFINITY;
    let smooth = |b: &Array2<f64>, c: &[f64]| {
        loss_and_grad(data, b, intercept.then_some(c))
    };
    for _ in 0..max_iter {
        let (fy, gy, gy0) = smooth(&yb, &y0);
        let (nb, nb0) = loop {
            let nb = Array2::from_shape_fn((km1, p), |(c, m)| {
                soft(yb[[c, m]] - step * gy[[c, m]], step * lambda)
            });
            let nb0: Vec<f64> = if intercept {
                (0..km1).map(|c| y0[c] - step * gy0[c]).collect()
            } else {
                vec![0.0; km1]
            };
            let (fx, _, _) = smooth(&nb, &nb0);
            let mut quad = fy;
            let mut sq = 0.0;
            for ((c, m), v) in nb.indexed_iter() {
                let d = v - yb[[c, m]];
                quad += gy[[c, m]] * d;
                sq += d * d;
            }
            for c in 0..km1 {
                let d = nb0[c] - y0[c];
                quad += gy0[c] * d;
                sq += d * d;
            }
            if fx <= quad + sq / (2.0 * step) + 1e-15 {
                break (nb, nb0);
            }
            step *= 0.5;
        };
        let f_new = objective(data, &nb, intercept.then_some(&nb0[..]), lambda);
        // gradient mapping at the extrapolated point; zero exactly at the optimum
        let mapping: f64 = nb
            .iter()
            .zip(yb.iter())
            .map(|(a, b)| (a - b).abs())
            .chain(nb0.iter().zip(&y0).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max)
            / step;
        // restart momentum whenever the objective goes up
        let t_next = if f_new > f_prev { 1.0 } else { (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0 };
        let w = if f_new > f_prev { 0.0 } else { (t - 1.0) / t_next };
        yb = Array2::from_shape_fn((km1, p), |(c, m)| nb[[c, m]] + w * (nb[[c, m]] - beta[[c, m]]));
        y0 = (0..km1).map(|c| nb0[c] + w * (nb0[c] - b0[c])).collect();
        beta = nb;
        b0 = nb0;
        t = t_next;
        f_prev = f_new;
        step *= 1.5;
        if mapping < 1e-10 {
            break;
        }
    }
    (beta, intercept.then_some(b0))
}

/// Binary logistic Lasso `min (1/n)Σ log(1+e^{η}) - yη + λ‖w‖₁` with
/// `η = xᵀw + b`, by cyclic coordinate descent on the exact coordinate
/// problem (one-dimensional proximal Newton iterations).
pub fn binary_logistic_lasso(x: &Array2<f64>, y: &[f64], lambda: f64, intercept: bool) -> (Vec<f64>, f64) {
    let (n, p) = x.dim();
    let mut w = vec![0.0; p];
    let mut b = 0.0;
    let mut eta = vec![0.0; n];
    let sigmoid = |v: f64| 1.0 / (1.0 + (-v).exp());
    for _ in 0..100_000 {
        let mut change = 0.0_f64;
        let coords = if intercept { p + 1 } else { p };
        for j in 0..coords {
            let col = |i: usize| if j == p { 1.0 } else { x[[i, j]] };
            let cur = if j == p { b } else { w[j] };
            let pen = if j == p { 0.0 } else { lambda };
            let mut v = cur;
            for _ in 0..50 {
                let (mut g, mut h) = (0.0, 0.0);
                for i in 0..n {
                    let e = eta[i] + (v - cur) * col(i);
                    let s = sigmoid(e);
                    g += (s - y[i]) * col(i) / n as f64;
                    h += s * (1.0 - s) * col(i) * col(i) / n as f64;
                }
                // minimize g (u - v) + h/2 (u - v)^2 + pen |u|
                let next = soft(h * v - g, pen) / h.max(1e-12);
                if (next - v).abs() < 1e-15 {
                    v = next;
                    break;
                }
                v = next;
            }
            let d = v - cur;
            if d != 0.0 {
                for i in 0..n {
                    eta[i] += d * col(i);
                }
                if j == p {
                    b = v;
                } else {
                    w[j] = v;
                }
                change = change.max(d.abs());
            }
        }
        if change < 1e-13 {
            break;
        }
    }
    (w, b)
}

/// Unpenalized multinomial MLE (with intercepts) by damped Newton on the
/// dense stacked Hessian. Layout: per contrast `[w_1..w_p, b]`.
pub fn newton_mle(data: &Dataset) -> (Array2<f64>, Vec<f64>) {
    let x = data.features();
    let (n, p) = x.dim();
    let km1 = data.num_classes() - 1;
    let q = p + 1;
    let d = km1 * q;
    let mut theta = DVector::<f64>::zeros(d);
    let unpack = |t: &DVector<f64>| {
        let beta = Array2::from_shape_fn((km1, p), |(c, m)| t[c * q + m]);
        let b0: Vec<f64> = (0..km1).map(|c| t[c * q + p]).collect();
        (beta, b0)
    };
    for _ in 0..200 {
        let (beta, b0) = unpack(&theta);
        let mut grad = DVector::<f64>::zeros(d);
        let mut hess = DMatrix::<f64>::zeros(d, d);
        for i in 0..n {
            let probs = softmax_ref(&eta_row(x, &beta, Some(&b0), i));
            let y = data.labels()[i] - 1;
            let z: Vec<f64> = (0..p).map(|m| x[[i, m]]).chain(std::iter::once(1.0)).collect();
            for c in 0..km1 {
                let r = probs[c] - f64::from(u8::from(y == c));
                for a in 0..q {
                    grad[c * q + a] += r * z[a] / n as f64;
                }
                for l in 0..km1 {
                    let w = if c == l { probs[c] * (1.0 - probs[c]) } else { -probs[c] * probs[l] };
                    for a in 0..q {
                        for bb in 0..q {
                            hess[(c * q + a, l * q + bb)] += w * z[a] * z[bb] / n as f64;
                        }
                    }
                }
            }
        }
        if grad.norm() < 1e-13 {
            break;
        }
        let step = hess.cholesky().expect("information matrix is positive definite").solve(&grad);
        let f0 = loss_and_grad(data, &beta, Some(&b0)).0;
        let mut t: f64 = 1.0;
        loop {
            let cand = &theta - &step * t;
            let (cb, cb0) = unpack(&cand);
            if loss_and_grad(data, &cb, Some(&cb0)).0 <= f0 + 1e-14 || t < 1e-10 {
                theta = cand;
                break;
            }
            t *= 0.5;
        }
    }
    unpack(&theta)
}

/// Proximal gradient for the nodewise program
/// `min -cᵀγ + ½γᵀAγ + λ‖γ‖₁` with `A` positive semidefinite.
pub fn nodewise_oracle(a: &DMatrix<f64>, c: &DVector<f64>, lambda: f64) -> DVector<f64> {
    let lip = a.symmetric_eigenvalues().iter().copied().fold(0.0, f64::max).max(1e-12);
    let mut g = DVector::<f64>::zeros(c.len());
    let mut y = g.clone();
    let mut t: f64 = 1.0;
    for _ in 0..200_000 {
        let grad = a * &y - c;
        let next = (&y - grad / lip).map(|v| soft(v, lambda / lip));
        let diff = (&next - &g).amax();
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        y = &next + (&next - &g) * ((t - 1.0) / t_next);
        g = next;
        t = t_next;
        if diff < 1e-15 {
            break;
        }
    }
    g
}

/// Random well-conditioned symmetric positive definite matrix.
pub fn random_spd(seed: u64, d: usize, ridge: f64) -> Array2<f64> {
    let mut r = rng(seed);
    let m = d + 3;
    let a = DMatrix::from_fn(m, d, |_, _| r.sample::<f64, _>(StandardNormal));
    let s = a.transpose() * a / m as f64 + DMatrix::identity(d, d) * ridge;
    Array2::from_shape_fn((d, d), |(i, j)| s[(i, j)])
}

pub fn to_dmatrix(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

pub fn max_abs_diff(a: impl IntoIterator<Item = f64>, b: impl IntoIterator<Item = f64>) -> f64 {
    a.into_iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn stacked(beta: &Array2<f64>) -> Array1<f64> {
    beta.iter().copied().collect()
}
