//! Beta regression with logit mean link and constant precision.
//!
//! The parameter vector is `[β₀ … β_{k−1}, log φ]`; the response density is
//! Beta(μφ, (1 − μ)φ) so that Var(y) = μ(1 − μ)/(1 + φ).

use nalgebra::{DMatrix, DVector};

use super::linalg::{check_full_rank, spd_inverse};
use super::optim::{bfgs, BfgsOptions};
use super::special::{digamma, expit, ln_gamma, logit, trigamma};
use super::{Family, FitResult, ModelFrame, Response};
use crate::error::{Error, Result};

/// log φ beyond which the precision is treated as diverging.
const MAX_LOG_PRECISION: f64 = 30.0;
/// Convergence: largest gradient component divided by the number of rows.
pub const BETA_SCALED_GRAD_TOL: f64 = 1e-6;

struct Obs {
    mu: f64,
    phi: f64,
    ystar: f64,
    mustar: f64,
}

fn obs(x: &DMatrix<f64>, y: &[f64], params: &DVector<f64>, i: usize) -> Obs {
    let k = x.ncols();
    let eta: f64 = (0..k).map(|j| x[(i, j)] * params[j]).sum();
    let mu = expit(eta).clamp(1e-12, 1.0 - 1e-12);
    let phi = params[k].exp();
    let ystar = logit(y[i]);
    let mustar = digamma(mu * phi) - digamma((1.0 - mu) * phi);
    Obs { mu, phi, ystar, mustar }
}

/// Weighted beta log-likelihood.
pub fn beta_loglik(x: &DMatrix<f64>, y: &[f64], w: &[f64], params: &DVector<f64>) -> f64 {
    let k = x.ncols();
    let phi = params[k].exp();
    let lg_phi = ln_gamma(phi);
    (0..y.len())
        .map(|i| {
            let eta: f64 = (0..k).map(|j| x[(i, j)] * params[j]).sum();
            let mu = expit(eta).clamp(1e-12, 1.0 - 1e-12);
            let (a, b) = (mu * phi, (1.0 - mu) * phi);
            w[i] * (lg_phi - ln_gamma(a) - ln_gamma(b) + (a - 1.0) * y[i].ln() + (b - 1.0) * (1.0 - y[i]).ln())
        })
        .sum()
}

/// Per-observation score contributions (unweighted), one row per observation.
pub(crate) fn beta_scores(x: &DMatrix<f64>, y: &[f64], params: &DVector<f64>) -> DMatrix<f64> {
    let (n, k) = (x.nrows(), x.ncols());
    let psi_phi = digamma(params[k].exp());
    let mut s = DMatrix::zeros(n, k + 1);
    for i in 0..n {
        let o = obs(x, y, params, i);
        let d = o.mu * (1.0 - o.mu);
        let g_eta = o.phi * (o.ystar - o.mustar) * d;
        for j in 0..k {
            s[(i, j)] = g_eta * x[(i, j)];
        }
        let b = (1.0 - o.mu) * o.phi;
        s[(i, k)] = o.phi * (o.mu * (o.ystar - o.mustar) + (1.0 - y[i]).ln() - digamma(b) + psi_phi);
    }
    s
}

/// Analytic gradient of [`beta_loglik`].
pub fn beta_gradient(x: &DMatrix<f64>, y: &[f64], w: &[f64], params: &DVector<f64>) -> DVector<f64> {
    let s = beta_scores(x, y, params);
    let mut g = DVector::zeros(params.len());
    for i in 0..y.len() {
        for j in 0..params.len() {
            g[j] += w[i] * s[(i, j)];
        }
    }
    g
}

/// Analytic Hessian of [`beta_loglik`].
pub fn beta_hessian(x: &DMatrix<f64>, y: &[f64], w: &[f64], params: &DVector<f64>) -> DMatrix<f64> {
    let k = x.ncols();
    let phi = params[k].exp();
    let (psi_phi, tri_phi) = (digamma(phi), trigamma(phi));
    let mut h = DMatrix::zeros(k + 1, k + 1);
    for i in 0..y.len() {
        let o = obs(x, y, params, i);
        let d = o.mu * (1.0 - o.mu);
        let (a, b) = (o.mu * phi, (1.0 - o.mu) * phi);
        let (ta, tb) = (trigamma(a), trigamma(b));
        let resid = o.ystar - o.mustar;
        let h_ee = phi * d * (1.0 - 2.0 * o.mu) * resid - phi * phi * d * d * (ta + tb);
        let h_ez = phi * d * (resid - phi * (o.mu * ta - (1.0 - o.mu) * tb));
        let s_phi = psi_phi - o.mu * digamma(a) - (1.0 - o.mu) * digamma(b)
            + o.mu * y[i].ln()
            + (1.0 - o.mu) * (1.0 - y[i]).ln();
        let h_zz = phi * s_phi
            + phi * phi * (tri_phi - o.mu * o.mu * ta - (1.0 - o.mu) * (1.0 - o.mu) * tb);
        let wi = w[i];
        for r in 0..k {
            let xr = x[(i, r)] * wi;
            for c in r..k {
                h[(r, c)] += xr * x[(i, c)] * h_ee;
            }
            h[(r, k)] += xr * h_ez;
        }
        h[(k, k)] += wi * h_zz;
    }
    for r in 0..=k {
        for c in 0..r {
            h[(r, c)] = h[(c, r)];
        }
    }
    h
}

/// Method-of-moments start: OLS on logit(y), precision from the residual
/// variance mapped back to the response scale.
fn start_values(x: &DMatrix<f64>, y: &[f64]) -> DVector<f64> {
    let (n, k) = (x.nrows(), x.ncols());
    let z = DVector::from_iterator(n, y.iter().map(|&v| logit(v)));
    let xtx = x.transpose() * x;
    let beta = spd_inverse(&xtx).map(|inv| inv * (x.transpose() * &z)).unwrap_or_else(|| DVector::zeros(k));
    let eta = x * &beta;
    let rss: f64 = (0..n).map(|i| (z[i] - eta[i]).powi(2)).sum();
    let sigma2 = rss / (n.saturating_sub(k).max(1)) as f64;
    let phi = (0..n)
        .map(|i| {
            let mu = expit(eta[i]);
            let var = sigma2 * (mu * (1.0 - mu)).powi(2);
            if var > 0.0 { mu * (1.0 - mu) / var - 1.0 } else { f64::INFINITY }
        })
        .sum::<f64>()
        / n as f64;
    let mut p = DVector::zeros(k + 1);
    p.rows_mut(0, k).copy_from(&beta);
    p[k] = phi.clamp(0.5, 1e6).ln();
    p
}

/// Maximum-likelihood beta regression (BFGS followed by Newton polishing).
///
/// Responses must lie strictly inside (0, 1); squeeze them first.
pub fn fit_beta_regression(frame: &ModelFrame) -> Result<FitResult> {
    let y = match &frame.response {
        Response::Unit(y) => y.as_slice(),
        _ => return Err(Error::Argument("beta regression needs a unit-interval response".into())),
    };
    if let Some(i) = y.iter().position(|&v| v <= 0.0 || v >= 1.0) {
        return Err(Error::Argument(format!(
            "row {i}: response {} is on the boundary of [0,1]; apply squeeze_unit_interval first",
            y[i]
        )));
    }
    check_full_rank(&frame.design, &frame.columns)?;
    let x = &frame.design;
    let w = frame.weight_vec();
    let (n, k) = (frame.nobs(), frame.ncoef());
    let scale = n as f64;

    let objective = |p: &DVector<f64>| {
        if !(p[k] <= MAX_LOG_PRECISION) {
            return (f64::INFINITY, DVector::zeros(k + 1));
        }
        let f = -beta_loglik(x, y, &w, p) / scale;
        let g = -beta_gradient(x, y, &w, p) / scale;
        (f, g)
    };
    let start = start_values(x, y);
    let min = bfgs(objective, start, BfgsOptions { max_iter: 400, grad_tol: 1e-9 });
    let mut params = min.x;
    let mut iterations = min.iterations;

    // Newton polish with the analytic Hessian.
    let mut ll = beta_loglik(x, y, &w, &params);
    for _ in 0..20 {
        let g = beta_gradient(x, y, &w, &params);
        if g.amax() / scale <= 1e-12 {
            break;
        }
        let neg_h = -beta_hessian(x, y, &w, &params);
        let Some(step) = neg_h.clone().cholesky().map(|c| c.solve(&g)) else {
            break;
        };
        let mut t = 1.0;
        let mut improved = false;
        for _ in 0..30 {
            let trial = &params + &step * t;
            if trial[k] <= MAX_LOG_PRECISION {
                let lt = beta_loglik(x, y, &w, &trial);
                if lt.is_finite() && lt >= ll - 1e-12 * ll.abs().max(1.0) {
                    params = trial;
                    ll = lt;
                    improved = true;
                    break;
                }
            }
            t *= 0.5;
        }
        iterations += 1;
        if !improved {
            break;
        }
    }

    let grad = beta_gradient(x, y, &w, &params);
    let info = -beta_hessian(x, y, &w, &params);
    let inv = spd_inverse(&info);
    let converged = grad.amax() / scale <= BETA_SCALED_GRAD_TOL
        && params[k] < MAX_LOG_PRECISION - 1e-6
        && inv.is_some();
    let covariance = match inv {
        Some(c) => c.view((0, 0), (k, k)).clone_owned(),
        None => DMatrix::from_element(k, k, f64::NAN),
    };
    let beta = params.rows(0, k).clone_owned();
    let eta = x * &beta;
    let fitted = eta.map(expit);
    Ok(FitResult {
        family: Family::Beta,
        coefficients: beta,
        covariance,
        dispersion: params[k].exp(),
        log_likelihood: Some(ll),
        converged,
        iterations,
        tau2: None,
        tau2_at_boundary: false,
        linear_predictor: eta,
        fitted,
    })
}

/// Full parameter vector `[β, log φ]` of a beta fit.
pub(crate) fn beta_params(fit: &FitResult) -> DVector<f64> {
    let k = fit.coefficients.len();
    let mut p = DVector::zeros(k + 1);
    p.rows_mut(0, k).copy_from(&fit.coefficients);
    p[k] = fit.dispersion.ln();
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use rand::Rng;
    use rand_distr::{Beta as BetaDist, Distribution};

    fn sim_frame(n: usize, seed: u64) -> ModelFrame {
        let mut rng = substream(&[seed]);
        let mut x = DMatrix::from_element(n, 3, 1.0);
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            x[(i, 1)] = rng.random_range(-1.0..1.0);
            x[(i, 2)] = f64::from(u8::from(i % 2 == 0));
            let mu = expit(-1.0 + 0.8 * x[(i, 1)] - 0.5 * x[(i, 2)]);
            let phi = 12.0;
            y.push(BetaDist::new(mu * phi, (1.0 - mu) * phi).unwrap().sample(&mut rng));
        }
        ModelFrame::new(Response::Unit(y), x, vec!["(Intercept)".into(), "x".into(), "g".into()]).unwrap()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let f = sim_frame(60, 3);
        let Response::Unit(y) = &f.response else { unreachable!() };
        let w = f.weight_vec();
        let mut rng = substream(&[99]);
        for _ in 0..10 {
            let p = DVector::from_iterator(4, (0..4).map(|j| {
                if j == 3 { rng.random_range(0.0..4.0) } else { rng.random_range(-1.5..1.5) }
            }));
            let g = beta_gradient(&f.design, y, &w, &p);
            for j in 0..4 {
                let h = 1e-6;
                let mut up = p.clone();
                up[j] += h;
                let mut dn = p.clone();
                dn[j] -= h;
                let fd = (beta_loglik(&f.design, y, &w, &up) - beta_loglik(&f.design, y, &w, &dn)) / (2.0 * h);
                assert!((g[j] - fd).abs() <= 1e-5 * g[j].abs().max(1.0), "j={j} g={} fd={fd}", g[j]);
            }
        }
    }

    #[test]
    fn hessian_matches_gradient_differences() {
        let f = sim_frame(40, 5);
        let Response::Unit(y) = &f.response else { unreachable!() };
        let w = f.weight_vec();
        let p = DVector::from_vec(vec![-0.7, 0.4, -0.2, 2.1]);
        let h = beta_hessian(&f.design, y, &w, &p);
        for j in 0..4 {
            let e = 1e-6;
            let mut up = p.clone();
            up[j] += e;
            let mut dn = p.clone();
            dn[j] -= e;
            let col = (beta_gradient(&f.design, y, &w, &up) - beta_gradient(&f.design, y, &w, &dn)) / (2.0 * e);
            for r in 0..4 {
                assert!((h[(r, j)] - col[r]).abs() <= 1e-5 * col[r].abs().max(1.0));
            }
        }
    }

    #[test]
    fn recovers_simulated_coefficients() {
        let fit = fit_beta_regression(&sim_frame(2000, 11)).unwrap();
        assert!(fit.converged);
        assert!((fit.coefficients[0] + 1.0).abs() < 0.08);
        assert!((fit.coefficients[1] - 0.8).abs() < 0.08);
        assert!((fit.coefficients[2] + 0.5).abs() < 0.08);
        assert!((fit.dispersion - 12.0).abs() < 1.5);
    }

    #[test]
    fn boundary_response_is_rejected() {
        let x = DMatrix::from_element(3, 1, 1.0);
        let f = ModelFrame::new(Response::Unit(vec![0.0, 0.3, 0.4]), x, vec!["(Intercept)".into()]).unwrap();
        match fit_beta_regression(&f) {
            Err(Error::Argument(msg)) => assert!(msg.contains("squeeze_unit_interval")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn zero_column_is_rank_error() {
        let mut f = sim_frame(20, 1);
        f.design.column_mut(2).fill(0.0);
        assert!(matches!(fit_beta_regression(&f), Err(Error::RankDeficient { index: 2, .. })));
    }
}
