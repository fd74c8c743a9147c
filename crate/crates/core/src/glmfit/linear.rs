use nalgebra::DVector;

use super::linalg::{check_full_rank, spd_inverse, weighted_gram};
use super::{Family, FitResult, ModelFrame, Response};
use crate::error::{Error, Result};

/// Weighted least squares with Gaussian model-based covariance σ̂²(X'WX)⁻¹.
pub fn fit_linear(frame: &ModelFrame) -> Result<FitResult> {
    let y = match &frame.response {
        Response::Continuous(y) | Response::Unit(y) => y,
        Response::Counts { .. } => return Err(Error::Argument("linear fit needs a real-valued response".into())),
    };
    check_full_rank(&frame.design, &frame.columns)?;
    let x = &frame.design;
    let w = frame.weight_vec();
    let (n, k) = (frame.nobs(), frame.ncoef());
    let bread = spd_inverse(&weighted_gram(x, &w))
        .ok_or_else(|| Error::Estimation("X'WX is singular".into()))?;
    let xtwy = DVector::from_iterator(k, (0..k).map(|j| (0..n).map(|i| x[(i, j)] * w[i] * y[i]).sum()));
    let beta = &bread * xtwy;
    let eta = x * &beta;
    let rss: f64 = (0..n).map(|i| w[i] * (y[i] - eta[i]).powi(2)).sum();
    let sigma2 = if n > k { rss / (n - k) as f64 } else { f64::NAN };
    let sigma2_ml = rss / n as f64;
    let log_w: f64 = w.iter().map(|v| v.ln()).sum();
    let ll = -0.5 * (n as f64 * (2.0 * std::f64::consts::PI * sigma2_ml).ln() - log_w + n as f64);
    Ok(FitResult {
        family: Family::Gaussian,
        coefficients: beta,
        covariance: bread * sigma2,
        dispersion: sigma2,
        log_likelihood: Some(ll),
        converged: true,
        iterations: 1,
        tau2: None,
        tau2_at_boundary: false,
        fitted: eta.clone(),
        linear_predictor: eta,
    })
}
