//! Binomial and quasi-binomial logistic regression by IRLS.

use nalgebra::{DMatrix, DVector};

use super::linalg::{check_full_rank, spd_inverse, spd_solve, weighted_gram};
use super::special::{expit, ln_gamma, log1pexp};
use super::{Family, FitResult, ModelFrame, Response};
use crate::error::{Error, Result};

pub const MAX_IRLS_ITER: usize = 100;
pub const IRLS_TOL: f64 = 1e-8;
const MU_EPS: f64 = 1e-15;

fn counts(frame: &ModelFrame) -> Result<(Vec<f64>, Vec<f64>)> {
    match &frame.response {
        Response::Counts { successes, trials } => Ok((
            successes.iter().map(|&v| f64::from(v)).collect(),
            trials.iter().map(|&v| f64::from(v)).collect(),
        )),
        _ => Err(Error::Argument("logistic regression needs count responses with trials".into())),
    }
}

fn ln_choose(n: f64, k: f64) -> f64 {
    ln_gamma(n + 1.0) - ln_gamma(k + 1.0) - ln_gamma(n - k + 1.0)
}

/// Weighted binomial log-likelihood (including the binomial coefficient).
pub fn binomial_loglik(y: &[f64], m: &[f64], w: &[f64], eta: &DVector<f64>) -> f64 {
    (0..y.len())
        .map(|i| w[i] * (ln_choose(m[i], y[i]) + y[i] * eta[i] - m[i] * log1pexp(eta[i])))
        .sum()
}

struct Irls {
    beta: DVector<f64>,
    eta: DVector<f64>,
    mu: DVector<f64>,
    converged: bool,
    iterations: usize,
}

fn working(y: &[f64], m: &[f64], w: &[f64], eta: &DVector<f64>) -> (Vec<f64>, Vec<f64>) {
    let mut ww = Vec::with_capacity(y.len());
    let mut z = Vec::with_capacity(y.len());
    for i in 0..y.len() {
        let mu = expit(eta[i]).clamp(MU_EPS, 1.0 - MU_EPS);
        let v = mu * (1.0 - mu);
        ww.push(w[i] * m[i] * v);
        z.push(eta[i] + (y[i] - m[i] * mu) / (m[i] * v));
    }
    (ww, z)
}

fn wls_step(x: &DMatrix<f64>, ww: &[f64], z: &[f64]) -> Option<DVector<f64>> {
    let gram = weighted_gram(x, ww);
    let mut rhs = DVector::zeros(x.ncols());
    for i in 0..x.nrows() {
        let f = ww[i] * z[i];
        for j in 0..x.ncols() {
            rhs[j] += x[(i, j)] * f;
        }
    }
    spd_solve(&gram, &rhs)
}

fn irls(x: &DMatrix<f64>, y: &[f64], m: &[f64], w: &[f64]) -> Result<Irls> {
    let n = y.len();
    // Start from the empirical logits, as glm() does.
    let eta0 = DVector::from_iterator(n, (0..n).map(|i| ((y[i] + 0.5) / (m[i] - y[i] + 0.5)).ln()));
    let (ww, z) = working(y, m, w, &eta0);
    let mut beta = wls_step(x, &ww, &z)
        .ok_or_else(|| Error::Estimation("singular information at IRLS start".into()))?;
    let mut eta = x * &beta;
    let mut ll = binomial_loglik(y, m, w, &eta);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < MAX_IRLS_ITER {
        iterations += 1;
        let (ww, z) = working(y, m, w, &eta);
        let Some(mut next) = wls_step(x, &ww, &z) else {
            break;
        };
        let mut next_eta = x * &next;
        let mut next_ll = binomial_loglik(y, m, w, &next_eta);
        let mut halvings = 0;
        while !(next_ll >= ll - 1e-10 * ll.abs().max(1.0)) && halvings < 30 {
            next = (&next + &beta) * 0.5;
            next_eta = x * &next;
            next_ll = binomial_loglik(y, m, w, &next_eta);
            halvings += 1;
        }
        let small = next
            .iter()
            .zip(beta.iter())
            .all(|(a, b)| (a - b).abs() <= IRLS_TOL * (1.0 + a.abs()));
        beta = next;
        eta = next_eta;
        ll = next_ll;
        if small {
            converged = true;
            break;
        }
    }
    let mu = eta.map(expit);
    Ok(Irls { beta, eta, mu, converged, iterations })
}

fn binomial_fit(frame: &ModelFrame, family: Family) -> Result<(FitResult, Vec<f64>, Vec<f64>, Vec<f64>)> {
    let (y, m) = counts(frame)?;
    check_full_rank(&frame.design, &frame.columns)?;
    let w = frame.weight_vec();
    let fit = irls(&frame.design, &y, &m, &w)?;
    let ww: Vec<f64> = (0..y.len())
        .map(|i| {
            let mu = fit.mu[i].clamp(MU_EPS, 1.0 - MU_EPS);
            w[i] * m[i] * mu * (1.0 - mu)
        })
        .collect();
    let p = frame.ncoef();
    let covariance = match spd_inverse(&weighted_gram(&frame.design, &ww)) {
        Some(c) => c,
        None if !fit.converged => DMatrix::from_element(p, p, f64::NAN),
        None => return Err(Error::Estimation("Fisher information is singular at the optimum".into())),
    };
    let log_likelihood = binomial_loglik(&y, &m, &w, &fit.eta);
    let result = FitResult {
        family,
        coefficients: fit.beta,
        covariance,
        dispersion: 1.0,
        log_likelihood: Some(log_likelihood),
        converged: fit.converged,
        iterations: fit.iterations,
        tau2: None,
        tau2_at_boundary: false,
        linear_predictor: fit.eta,
        fitted: fit.mu,
    };
    Ok((result, y, m, w))
}

/// Maximum-likelihood logistic regression for binomial counts.
///
/// Non-convergence (e.g. separation) is reported through `converged = false`.
pub fn fit_binomial_logistic(frame: &ModelFrame) -> Result<FitResult> {
    binomial_fit(frame, Family::Binomial).map(|r| r.0)
}

/// Quasi-binomial regression: binomial score equations with Pearson
/// dispersion φ̂ = X²/(N − k) scaling the covariance.
pub fn fit_quasibinomial(frame: &ModelFrame) -> Result<FitResult> {
    let n = frame.nobs();
    let k = frame.ncoef();
    if n <= k {
        return Err(Error::Estimation(format!(
            "dispersion undefined with {n} observations and {k} coefficients"
        )));
    }
    let (mut fit, y, m, w) = binomial_fit(frame, Family::QuasiBinomial)?;
    let pearson: f64 = (0..n)
        .map(|i| {
            let mu = fit.fitted[i].clamp(MU_EPS, 1.0 - MU_EPS);
            w[i] * (y[i] - m[i] * mu).powi(2) / (m[i] * mu * (1.0 - mu))
        })
        .sum();
    let phi = pearson / (n - k) as f64;
    fit.dispersion = phi;
    fit.covariance *= phi;
    fit.log_likelihood = None;
    Ok(fit)
}
