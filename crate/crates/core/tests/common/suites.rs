//! Property suites shared by the integration tests and the acceptance run.
//! Each returns the worst measured discrepancy so callers choose how to report.

use ndarray::{Array1, Array2};
use rand::Rng;
use sparsemn::debias::{self, InferenceOptions, NodewiseOptions};
use sparsemn::model::{avg_neg_log_likelihood, empirical_sigma, score};
use sparsemn::solver::{self, SolverOptions};
use sparsemn::{CoefficientSet, Dataset, SigmaHat};

use super::*;

#[derive(Debug, Default, Clone, Copy)]
pub struct SolverReport {
    pub instances: usize,
    /// Largest `F(ours) - F(oracle)`; negative values mean ours is lower.
    pub worst_objective_gap: f64,
    /// Largest KKT residual of our solution, computed with the reference gradient.
    pub worst_kkt: f64,
    pub binary_instances: usize,
    pub worst_binary_linf: f64,
}

/// KKT residual of `(beta, b0)` for the Lasso at `lambda`, from the reference gradient.
pub fn reference_kkt(data: &Dataset, beta: &Array2<f64>, b0: Option<&[f64]>, lambda: f64) -> f64 {
    let (_, g, g0) = loss_and_grad(data, beta, b0);
    let mut worst = 0.0_f64;
    for ((c, m), &b) in beta.indexed_iter() {
        let r = if b == 0.0 {
            (g[[c, m]].abs() - lambda).max(0.0)
        } else {
            (g[[c, m]] + lambda * b.signum()).abs()
        };
        worst = worst.max(r);
    }
    if b0.is_some() {
        worst = g0.iter().fold(worst, |w, v| w.max(v.abs()));
    }
    worst
}

/// Multinomial instance `i` of the solver suite: sizes, penalty and intercept
/// flag vary with `i`.
pub fn solver_instance(i: u64) -> (Dataset, f64, bool) {
    let mut r = rng(7000 + i);
    let n = r.gen_range(20..60);
    let p = r.gen_range(2..9);
    let k = r.gen_range(2..5);
    let data = random_dataset(8000 + i, n, p, k, 1.0);
    let intercept = i % 2 == 1;
    let frac = r.gen_range(0.05..0.8);
    (data.clone(), frac * solver::lambda_max(&data, intercept), intercept)
}

pub fn solver_suite(instances: u64, binary_instances: u64) -> SolverReport {
    let mut rep = SolverReport {
        instances: instances as usize,
        binary_instances: binary_instances as usize,
        worst_objective_gap: f64::NEG_INFINITY,
        ..SolverReport::default()
    };
    for i in 0..instances {
        let (data, lambda, intercept) = solver_instance(i);
        let opts = SolverOptions { fit_intercept: intercept, ..SolverOptions::default() };
        let ours = solver::fit_single(&data, lambda, &CoefficientSet::zeros(data.num_classes(), data.p()), &opts)
            .unwrap()
            .beta;
        let b0: Option<Vec<f64>> = ours.intercepts().map(|b| b.to_vec());
        let (ob, ob0) = prox_gradient(&data, lambda, intercept, 200_000);
        let f_ours = objective(&data, ours.contrasts(), b0.as_deref(), lambda);
        let f_oracle = objective(&data, &ob, ob0.as_deref(), lambda);
        rep.worst_objective_gap = rep.worst_objective_gap.max(f_ours - f_oracle);
        rep.worst_kkt = rep.worst_kkt.max(reference_kkt(&data, ours.contrasts(), b0.as_deref(), lambda));
    }
    for i in 0..binary_instances {
        let mut r = rng(9000 + i);
        let n = r.gen_range(25..70);
        let p = r.gen_range(2..7);
        let data = random_dataset(9500 + i, n, p, 2, 1.0);
        let intercept = i % 2 == 0;
        let lambda = r.gen_range(0.05..0.7) * solver::lambda_max(&data, intercept);
        let opts = SolverOptions { fit_intercept: intercept, ..SolverOptions::default() };
        let ours = solver::fit_single(&data, lambda, &CoefficientSet::zeros(2, p), &opts).unwrap().beta;
        let y: Vec<f64> = data.labels().iter().map(|&c| f64::from(u8::from(c == 1))).collect();
        let (w, b) = binary_logistic_lasso(data.features(), &y, lambda, intercept);
        let mut d = max_abs_diff(ours.contrasts().iter().copied(), w);
        if let Some(b0) = ours.intercepts() {
            d = d.max((b0[0] - b).abs());
        }
        rep.worst_binary_linf = rep.worst_binary_linf.max(d);
    }
    rep
}

#[derive(Debug, Default, Clone, Copy)]
pub struct CalculusReport {
    pub instances: usize,
    pub worst_gradient_rel: f64,
    pub worst_hessian_rel: f64,
    pub worst_asymmetry: f64,
    pub min_eigenvalue: f64,
}

fn random_coefficients(seed: u64, k: usize, p: usize, scale: f64) -> CoefficientSet {
    let mut r = rng(seed);
    CoefficientSet::new(Array2::from_shape_fn((k - 1, p), |_| scale * r.gen_range(-1.0..1.0)), None).unwrap()
}

fn shifted(beta: &CoefficientSet, j: usize, h: f64) -> CoefficientSet {
    let mut s = beta.stacked();
    s[j] += h;
    CoefficientSet::new(Array2::from_shape_vec(beta.contrasts().raw_dim(), s.to_vec()).unwrap(), None).unwrap()
}

/// Central differences of the loss against the score and of the score
/// against Σ̂, with errors relative to `max(1, |analytic|)`.
pub fn calculus_suite(instances: u64) -> CalculusReport {
    let mut rep = CalculusReport {
        instances: instances as usize,
        min_eigenvalue: f64::INFINITY,
        ..CalculusReport::default()
    };
    let h = 1e-5;
    for inst in 0..instances {
        let k = 2 + (inst % 3) as usize;
        let p = 2 + (inst % 4) as usize;
        let data = random_dataset(100 + inst, 30, p, k, 0.8);
        let beta = random_coefficients(200 + inst, k, p, 0.7);
        let g = score(&data, &beta).unwrap();
        let sigma = empirical_sigma(&data, &beta).unwrap();
        for j in 0..beta.dim() {
            let up = shifted(&beta, j, h);
            let dn = shifted(&beta, j, -h);
            let fd = (avg_neg_log_likelihood(&data, &up).unwrap() - avg_neg_log_likelihood(&data, &dn).unwrap())
                / (2.0 * h);
            rep.worst_gradient_rel = rep.worst_gradient_rel.max((fd - g[j]).abs() / g[j].abs().max(1.0));
            let col = (score(&data, &up).unwrap() - score(&data, &dn).unwrap()) / (2.0 * h);
            for r in 0..beta.dim() {
                let a = sigma.matrix[[r, j]];
                rep.worst_hessian_rel = rep.worst_hessian_rel.max((col[r] - a).abs() / a.abs().max(1.0));
            }
        }
        rep.worst_asymmetry = rep.worst_asymmetry.max(sigma.asymmetry());
        rep.min_eigenvalue = rep.min_eigenvalue.min(sigma.min_eigenvalue());
    }
    rep
}

#[derive(Debug, Default, Clone, Copy)]
pub struct AlgebraReport {
    /// `max |b̂ - β̂|` when β̂ is the unpenalized MLE.
    pub mle_identity_gap: f64,
    pub duality_triples: usize,
    /// Triples where `p < α` disagrees with `0 ∉ CI`.
    pub duality_violations: usize,
    /// Largest distance of a CI endpoint from 0 when `α` equals the p-value, in units of se.
    pub boundary_gap: f64,
    /// `‖Θ̂Σ̂ - I‖_max` at `λ_j = 1e-8`.
    pub theta_sigma_dev: f64,
    /// Largest violation of the nodewise optimality conditions.
    pub nodewise_kkt: f64,
}

/// Largest violation of the nodewise KKT conditions for row `j` at `lambda`.
pub fn nodewise_kkt_violation(sigma: &Array2<f64>, j: usize, gamma: &Array1<f64>, lambda: f64) -> f64 {
    let d = sigma.nrows();
    let others: Vec<usize> = (0..d).filter(|&r| r != j).collect();
    let mut worst = 0.0_f64;
    for (a, &r) in others.iter().enumerate() {
        let fit: f64 = others.iter().enumerate().map(|(b, &s)| sigma[[r, s]] * gamma[b]).sum();
        let resid = fit - sigma[[r, j]];
        let v = if gamma[a] == 0.0 {
            (resid.abs() - lambda).max(0.0)
        } else {
            (resid + lambda * gamma[a].signum()).abs()
        };
        worst = worst.max(v);
    }
    worst
}

pub fn algebra_suite() -> AlgebraReport {
    let mut rep = AlgebraReport::default();

    // debiasing at the unpenalized MLE leaves it unchanged
    let data = random_dataset(31, 300, 3, 3, 0.7);
    let (b, b0) = newton_mle(&data);
    let mle = CoefficientSet::new(b, Some(Array1::from(b0))).unwrap();
    let opts = InferenceOptions {
        solver: SolverOptions { fit_intercept: true, ..SolverOptions::default() },
        ..InferenceOptions::default()
    };
    let report = debias::infer_at(&data, &mle, 1e-3, 5, 0.05, &opts).unwrap();
    for c in &report.coordinates {
        let bh = c.b_hat.expect("well-conditioned rows succeed");
        rep.mle_identity_gap = rep.mle_identity_gap.max((bh - c.beta_hat).abs());
    }

    // CI / p-value duality
    let mut r = rng(77);
    rep.duality_triples = 100;
    for _ in 0..rep.duality_triples {
        let b: f64 = r.gen_range(-4.0..4.0);
        let se: f64 = r.gen_range(0.05..2.0);
        let alpha: f64 = r.gen_range(0.001..0.3);
        let p = debias::p_value_from_se(b, se);
        let (lo, hi) = debias::interval_from_se(b, se, alpha).unwrap();
        let excludes = lo > 0.0 || hi < 0.0;
        if (p < alpha) != excludes {
            rep.duality_violations += 1;
        }
        if p > 1e-12 && p < 1.0 {
            let (lo, hi) = debias::interval_from_se(b, se, p).unwrap();
            rep.boundary_gap = rep.boundary_gap.max(lo.abs().min(hi.abs()) / se);
        }
    }

    // near-exact inverse at tiny penalty
    let d = 8;
    let s = random_spd(41, d, 0.5);
    let sigma = SigmaHat::new(s.clone(), 100).unwrap();
    let nw = NodewiseOptions { tol: 1e-12, max_iter: 100_000, ..NodewiseOptions::default() };
    let mut theta = Array2::<f64>::zeros((d, d));
    for j in 0..d {
        let row = debias::nodewise_row(&sigma, j, 1e-8, &nw).unwrap();
        theta.row_mut(j).assign(&row.theta_row);
    }
    let prod = theta.dot(&s);
    for ((i, j), v) in prod.indexed_iter() {
        let target = if i == j { 1.0 } else { 0.0 };
        rep.theta_sigma_dev = rep.theta_sigma_dev.max((v - target).abs());
    }

    // KKT certificates on an empirical Σ̂ and a random SPD matrix
    let data = random_dataset(51, 60, 4, 3, 1.0);
    let emp = empirical_sigma(&data, &random_coefficients(52, 3, 4, 0.5)).unwrap();
    let spd = SigmaHat::new(random_spd(53, 10, 0.1), 50).unwrap();
    for sig in [&emp, &spd] {
        for j in 0..sig.dim() {
            for lambda in [0.005, 0.05] {
                let row = debias::nodewise_row(sig, j, lambda, &NodewiseOptions::default()).unwrap();
                rep.nodewise_kkt = rep.nodewise_kkt.max(nodewise_kkt_violation(&sig.matrix, j, &row.gamma, lambda));
            }
        }
    }
    rep
}
