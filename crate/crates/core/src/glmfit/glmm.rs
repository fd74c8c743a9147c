//! Random-intercept logistic regression, one intercept per row, with the
//! marginal likelihood integrated by adaptive Gauss-Hermite quadrature.
//!
//! Parameters are `[β, log τ]`. The integrand for row j is centred at its
//! conditional mode and scaled by the curvature there, so a modest number of
//! nodes integrates it essentially exactly.

use nalgebra::{DMatrix, DVector};

use super::linalg::{check_full_rank, spd_inverse};
use super::logistic::fit_binomial_logistic;
use super::optim::{bfgs, BfgsOptions};
use super::special::{expit, gauss_hermite, ln_gamma, log1pexp};
use super::{Family, FitResult, ModelFrame, Response};
use crate::error::{Error, Result};

pub const DEFAULT_QUADRATURE_NODES: usize = 15;
const MIN_LOG_TAU: f64 = -10.0;
/// τ̂² below this is reported as a boundary estimate of 0.
const BOUNDARY_TAU2: f64 = 1e-6;

struct Rule {
    nodes: Vec<f64>,
    log_weights: Vec<f64>,
}

impl Rule {
    fn new(n: usize) -> Self {
        let (x, w) = gauss_hermite(n);
        // e^{x²} folded into the weights: ∫ f(v) dv ≈ √2σ Σ w_k e^{x_k²} f(v̂ + √2σ x_k)
        let log_weights = x.iter().zip(&w).map(|(x, w)| w.ln() + x * x).collect();
        Self { nodes: x, log_weights }
    }
}

fn conditional_mode(y: f64, m: f64, eta: f64, tau2: f64) -> (f64, f64) {
    let mut v = 0.0;
    for _ in 0..100 {
        let mu = expit(eta + v);
        let d1 = y - m * mu - v / tau2;
        let d2 = -m * mu * (1.0 - mu) - 1.0 / tau2;
        let step = (d1 / d2).clamp(-5.0, 5.0);
        v -= step;
        if step.abs() < 1e-12 * (1.0 + v.abs()) {
            break;
        }
    }
    let mu = expit(eta + v);
    let curvature = m * mu * (1.0 - mu) + 1.0 / tau2;
    (v, 1.0 / curvature.sqrt())
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let mx = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    mx + v.iter().map(|t| (t - mx).exp()).sum::<f64>().ln()
}

fn eval(x: &DMatrix<f64>, y: &[f64], m: &[f64], params: &DVector<f64>, rule: &Rule) -> (f64, DVector<f64>) {
    let k = x.ncols();
    let tau2 = (2.0 * params[k]).exp();
    let beta = params.rows(0, k);
    let mut ll = 0.0;
    let mut grad = DVector::zeros(k + 1);
    let mut terms = vec![0.0; rule.nodes.len()];
    let sqrt2 = std::f64::consts::SQRT_2;
    for i in 0..y.len() {
        let eta: f64 = (0..k).map(|j| x[(i, j)] * beta[j]).sum();
        let (mode, sd) = conditional_mode(y[i], m[i], eta, tau2);
        for (t, (&z, &lw)) in terms.iter_mut().zip(rule.nodes.iter().zip(&rule.log_weights)) {
            let v = mode + sqrt2 * sd * z;
            *t = lw + y[i] * (eta + v) - m[i] * log1pexp(eta + v) - 0.5 * v * v / tau2;
        }
        let lse = log_sum_exp(&terms);
        ll += ln_gamma(m[i] + 1.0) - ln_gamma(y[i] + 1.0) - ln_gamma(m[i] - y[i] + 1.0)
            + (sqrt2 * sd).ln()
            - 0.5 * (2.0 * std::f64::consts::PI * tau2).ln()
            + lse;
        let mut g_eta = 0.0;
        let mut g_tau = 0.0;
        for (t, &z) in terms.iter().zip(&rule.nodes) {
            let wgt = (t - lse).exp();
            let v = mode + sqrt2 * sd * z;
            g_eta += wgt * (y[i] - m[i] * expit(eta + v));
            g_tau += wgt * (v * v / tau2 - 1.0);
        }
        for j in 0..k {
            grad[j] += g_eta * x[(i, j)];
        }
        grad[k] += g_tau;
    }
    (ll, grad)
}

/// Marginal log-likelihood and its gradient in `[β, log τ]`.
pub fn glmm_loglik_and_grad(
    x: &DMatrix<f64>,
    y: &[f64],
    m: &[f64],
    params: &DVector<f64>,
    quadrature_nodes: usize,
) -> (f64, DVector<f64>) {
    eval(x, y, m, params, &Rule::new(quadrature_nodes))
}

/// Random-intercept logistic regression (one cluster per row).
pub fn fit_glmm_random_intercept(frame: &ModelFrame, quadrature_nodes: usize) -> Result<FitResult> {
    if quadrature_nodes < 5 {
        return Err(Error::Argument(format!("need at least 5 quadrature nodes, got {quadrature_nodes}")));
    }
    let (y, m): (Vec<f64>, Vec<f64>) = match &frame.response {
        Response::Counts { successes, trials } => (
            successes.iter().map(|&v| f64::from(v)).collect(),
            trials.iter().map(|&v| f64::from(v)).collect(),
        ),
        _ => return Err(Error::Argument("GLMM needs count responses with trials".into())),
    };
    check_full_rank(&frame.design, &frame.columns)?;
    let x = &frame.design;
    let (n, k) = (frame.nobs(), frame.ncoef());
    let rule = Rule::new(quadrature_nodes);

    let glm = fit_binomial_logistic(frame)?;
    let mut start = DVector::zeros(k + 1);
    if glm.converged {
        start.rows_mut(0, k).copy_from(&glm.coefficients);
    }
    start[k] = 0.5f64.ln();

    let scale = n as f64;
    let objective = |p: &DVector<f64>| {
        if !(p[k] >= MIN_LOG_TAU) || p[k] > 5.0 {
            return (f64::INFINITY, DVector::zeros(k + 1));
        }
        let (ll, g) = eval(x, &y, &m, p, &rule);
        (-ll / scale, -g / scale)
    };
    let min = bfgs(objective, start, BfgsOptions { max_iter: 500, grad_tol: 1e-9 });
    let params = min.x;
    let (ll, grad) = eval(x, &y, &m, &params, &rule);
    let tau2_hat = (2.0 * params[k]).exp();
    let at_boundary = tau2_hat < BOUNDARY_TAU2;

    // Observed information from differences of the analytic gradient.
    let dim = if at_boundary { k } else { k + 1 };
    let mut info = DMatrix::zeros(dim, dim);
    for j in 0..dim {
        let h = 1e-5 * params[j].abs().max(1.0);
        let mut up = params.clone();
        up[j] += h;
        let mut dn = params.clone();
        dn[j] -= h;
        let col = (eval(x, &y, &m, &dn, &rule).1 - eval(x, &y, &m, &up, &rule).1) / (2.0 * h);
        for r in 0..dim {
            info[(r, j)] = col[r];
        }
    }
    let inv = spd_inverse(&((&info + info.transpose()) * 0.5));
    let covariance = match &inv {
        Some(c) => c.view((0, 0), (k, k)).clone_owned(),
        None => DMatrix::from_element(k, k, f64::NAN),
    };
    let converged = (min.converged || grad.amax() / scale <= 1e-6 || at_boundary) && inv.is_some();
    let beta = params.rows(0, k).clone_owned();
    let eta = x * &beta;
    Ok(FitResult {
        family: Family::BinomialGlmm,
        coefficients: beta,
        covariance,
        dispersion: 1.0,
        log_likelihood: Some(ll),
        converged,
        iterations: min.iterations,
        tau2: Some(if at_boundary { 0.0 } else { tau2_hat }),
        tau2_at_boundary: at_boundary,
        fitted: eta.map(expit),
        linear_predictor: eta,
    })
}
