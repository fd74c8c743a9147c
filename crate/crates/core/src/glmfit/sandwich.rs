//! Sandwich (bread × meat × bread) covariance estimators.

use std::collections::BTreeMap;

use nalgebra::DMatrix;

use super::beta::{beta_hessian, beta_params, beta_scores};
use super::linalg::{spd_inverse, symmetrize, weighted_gram};
use super::special::trigamma;
use super::{Family, FitResult, ModelFrame, Response, VarianceSpec};
use crate::error::{Error, Result};

/// Bread (inverse information over all parameters) and per-row score matrix.
fn pieces(fit: &FitResult, frame: &ModelFrame) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let x = &frame.design;
    let w = frame.weight_vec();
    let (n, k) = (frame.nobs(), frame.ncoef());
    match (fit.family, &frame.response) {
        (Family::Binomial | Family::QuasiBinomial, Response::Counts { successes, trials }) => {
            let ww: Vec<f64> = (0..n)
                .map(|i| w[i] * f64::from(trials[i]) * fit.fitted[i] * (1.0 - fit.fitted[i]))
                .collect();
            let bread = spd_inverse(&weighted_gram(x, &ww))
                .ok_or_else(|| Error::Estimation("singular Fisher information".into()))?;
            let scores = DMatrix::from_fn(n, k, |i, j| {
                w[i] * (f64::from(successes[i]) - f64::from(trials[i]) * fit.fitted[i]) * x[(i, j)]
            });
            Ok((bread, scores))
        }
        (Family::Gaussian, Response::Continuous(y) | Response::Unit(y)) => {
            let bread = spd_inverse(&weighted_gram(x, &w))
                .ok_or_else(|| Error::Estimation("X'WX is singular".into()))?;
            let scores = DMatrix::from_fn(n, k, |i, j| w[i] * (y[i] - fit.fitted[i]) * x[(i, j)]);
            Ok((bread, scores))
        }
        (Family::Beta, Response::Unit(y)) => {
            let params = beta_params(fit);
            let bread = spd_inverse(&(-beta_hessian(x, y, &w, &params)))
                .ok_or_else(|| Error::Estimation("observed information is not positive definite".into()))?;
            let mut scores = beta_scores(x, y, &params);
            for i in 0..n {
                scores.row_mut(i).scale_mut(w[i]);
            }
            Ok((bread, scores))
        }
        (Family::BinomialGlmm, _) => Err(Error::Argument("sandwich covariance is not available for GLMM fits".into())),
        _ => Err(Error::Argument("fit family does not match the frame's response type".into())),
    }
}

/// Hat values of the (working-weighted) mean model.
pub fn leverages(fit: &FitResult, frame: &ModelFrame) -> Result<Vec<f64>> {
    let x = &frame.design;
    let w = frame.weight_vec();
    let n = frame.nobs();
    let ww: Vec<f64> = match (fit.family, &frame.response) {
        (Family::Binomial | Family::QuasiBinomial, Response::Counts { trials, .. }) => (0..n)
            .map(|i| w[i] * f64::from(trials[i]) * fit.fitted[i] * (1.0 - fit.fitted[i]))
            .collect(),
        (Family::Gaussian, _) => w.clone(),
        (Family::Beta, _) => {
            let phi = fit.dispersion;
            (0..n)
                .map(|i| {
                    let mu = fit.fitted[i];
                    let d = mu * (1.0 - mu);
                    w[i] * phi * (trigamma(mu * phi) + trigamma((1.0 - mu) * phi)) * d * d
                })
                .collect()
        }
        _ => return Err(Error::Argument("leverage undefined for this fit".into())),
    };
    let inv = spd_inverse(&weighted_gram(x, &ww)).ok_or_else(|| Error::Estimation("singular X'WX".into()))?;
    Ok((0..n)
        .map(|i| {
            let xi = x.row(i);
            ww[i] * (xi * &inv * xi.transpose())[(0, 0)]
        })
        .collect())
}

/// Covariance of the regression coefficients under `spec`.
pub fn sandwich_covariance(fit: &FitResult, frame: &ModelFrame, spec: &VarianceSpec) -> Result<DMatrix<f64>> {
    let k = fit.coefficients.len();
    if *spec == VarianceSpec::ModelBased {
        return Ok(fit.covariance.clone());
    }
    let n = frame.nobs();
    let (bread, mut scores) = pieces(fit, frame)?;
    let meat = match spec {
        VarianceSpec::ModelBased => unreachable!(),
        VarianceSpec::HC0 => scores.transpose() * &scores,
        VarianceSpec::HC1 => {
            if n <= k {
                return Err(Error::Argument("HC1 needs more observations than coefficients".into()));
            }
            scores.transpose() * &scores * (n as f64 / (n - k) as f64)
        }
        VarianceSpec::HC3 => {
            let h = leverages(fit, frame)?;
            for (i, &hi) in h.iter().enumerate() {
                if hi >= 1.0 - 1e-10 {
                    return Err(Error::UnitLeverage { row: i });
                }
                scores.row_mut(i).scale_mut(1.0 / (1.0 - hi));
            }
            scores.transpose() * &scores
        }
        VarianceSpec::ClusterRobust(ids) => {
            if ids.len() != n {
                return Err(Error::Argument("cluster ids length differs from the frame".into()));
            }
            let mut sums: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
            for (i, id) in ids.iter().enumerate() {
                let acc = sums.entry(*id).or_insert_with(|| vec![0.0; scores.ncols()]);
                for (a, s) in acc.iter_mut().zip(scores.row(i).iter()) {
                    *a += s;
                }
            }
            let d = scores.ncols();
            let mut m = DMatrix::zeros(d, d);
            for s in sums.values() {
                for r in 0..d {
                    for c in 0..d {
                        m[(r, c)] += s[r] * s[c];
                    }
                }
            }
            m
        }
    };
    let full = &bread * meat * &bread;
    Ok(symmetrize(&full.view((0, 0), (k, k)).clone_owned()))
}
