//! Estimation core: logistic, quasi-binomial, beta and random-intercept
//! logistic regression, plus model-based and sandwich covariance estimators.
//!
//! Everything here is written against small dense designs (a few hundred
//! villages, under ten regressors) and favours exactness over speed.

mod beta;
mod glmm;
pub mod linalg;
mod linear;
mod logistic;
pub mod optim;
mod sandwich;
pub mod special;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub use beta::{beta_gradient, beta_hessian, beta_loglik, fit_beta_regression};
pub use glmm::{fit_glmm_random_intercept, glmm_loglik_and_grad, DEFAULT_QUADRATURE_NODES};
pub use linear::fit_linear;
pub use logistic::{binomial_loglik, fit_binomial_logistic, fit_quasibinomial};
pub use sandwich::{leverages, sandwich_covariance};

/// Observed outcome of a model frame.
#[derive(Debug, Clone, PartialEq)]
pub enum Response {
    /// Binomial counts: successes out of trials.
    Counts { successes: Vec<u32>, trials: Vec<u32> },
    /// Proportions on the unit interval (beta regression).
    Unit(Vec<f64>),
    /// Unrestricted real responses (linear models).
    Continuous(Vec<f64>),
}

impl Response {
    pub fn len(&self) -> usize {
        match self {
            Response::Counts { successes, .. } => successes.len(),
            Response::Unit(y) | Response::Continuous(y) => y.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Response, design matrix and optional prior weights / cluster labels.
#[derive(Debug, Clone)]
pub struct ModelFrame {
    pub response: Response,
    pub design: DMatrix<f64>,
    pub columns: Vec<String>,
    pub weights: Option<Vec<f64>>,
    pub cluster_ids: Option<Vec<u64>>,
}

impl ModelFrame {
    pub fn new(response: Response, design: DMatrix<f64>, columns: Vec<String>) -> Result<Self> {
        let n = response.len();
        if design.nrows() != n {
            return Err(Error::Argument(format!(
                "design has {} rows but response has {n}",
                design.nrows()
            )));
        }
        if columns.len() != design.ncols() {
            return Err(Error::Argument(format!(
                "{} column names for {} design columns",
                columns.len(),
                design.ncols()
            )));
        }
        if design.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument("design contains non-finite entries".into()));
        }
        match &response {
            Response::Counts { successes, trials } => {
                if trials.len() != n {
                    return Err(Error::Argument("successes and trials differ in length".into()));
                }
                if let Some(i) = (0..n).find(|&i| trials[i] == 0 || successes[i] > trials[i]) {
                    return Err(Error::Argument(format!(
                        "row {i}: need 0 <= successes <= trials and trials > 0"
                    )));
                }
            }
            Response::Unit(y) => {
                if let Some(i) = y.iter().position(|v| !(0.0..=1.0).contains(v)) {
                    return Err(Error::Argument(format!("row {i}: response {} outside [0,1]", y[i])));
                }
            }
            Response::Continuous(y) => {
                if y.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Argument("response contains non-finite values".into()));
                }
            }
        }
        Ok(Self { response, design, columns, weights: None, cluster_ids: None })
    }

    pub fn with_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != self.nobs() {
            return Err(Error::Argument("weights length differs from response".into()));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::Argument("weights must be positive and finite".into()));
        }
        self.weights = Some(weights);
        Ok(self)
    }

    pub fn with_clusters(mut self, ids: Vec<u64>) -> Result<Self> {
        if ids.len() != self.nobs() {
            return Err(Error::Argument("cluster ids length differs from response".into()));
        }
        self.cluster_ids = Some(ids);
        Ok(self)
    }

    pub fn nobs(&self) -> usize {
        self.response.len()
    }

    pub fn ncoef(&self) -> usize {
        self.design.ncols()
    }

    pub(crate) fn weight_vec(&self) -> Vec<f64> {
        self.weights.clone().unwrap_or_else(|| vec![1.0; self.nobs()])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Binomial,
    QuasiBinomial,
    Beta,
    Gaussian,
    BinomialGlmm,
}

/// Output of any of the fitting routines.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub family: Family,
    pub coefficients: DVector<f64>,
    /// Model-based covariance of `coefficients`.
    pub covariance: DMatrix<f64>,
    /// 1 for binomial, Pearson φ̂ for quasi-binomial, precision φ for beta,
    /// residual variance for Gaussian.
    pub dispersion: f64,
    pub log_likelihood: Option<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Random-intercept variance (GLMM only).
    pub tau2: Option<f64>,
    pub tau2_at_boundary: bool,
    pub linear_predictor: DVector<f64>,
    pub fitted: DVector<f64>,
}

impl FitResult {
    pub fn std_errors(&self) -> DVector<f64> {
        self.covariance.diagonal().map(|v| v.max(0.0).sqrt())
    }
}

/// Covariance flavour for [`sandwich_covariance`].
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum VarianceSpec {
    ModelBased,
    HC0,
    HC1,
    #[default]
    HC3,
    ClusterRobust(Vec<u64>),
}

/// (x − mean) / sd with the sample (n − 1) standard deviation.
pub fn standardize(values: &[f64]) -> Result<Vec<f64>> {
    let (mean, sd) = mean_sd(values);
    if !(sd > 0.0) {
        return Err(Error::Argument("cannot standardize a vector with zero spread".into()));
    }
    Ok(values.iter().map(|v| (v - mean) / sd).collect())
}

/// Sample mean and (n − 1) standard deviation; the SD of fewer than two
/// values is 0.
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let ss = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
    (mean, (ss / (n - 1) as f64).sqrt())
}

/// Smithson–Verkuilen squeeze of [0,1] data into the open interval:
/// y' = (y(n − 1) + 0.5) / n.
pub fn squeeze_unit_interval(y: &[f64], n: usize) -> Vec<f64> {
    let nf = n as f64;
    y.iter().map(|v| (v * (nf - 1.0) + 0.5) / nf).collect()
}

/// Logistic-scale residual variance π²/3.
pub const LOGISTIC_RESIDUAL_VARIANCE: f64 = std::f64::consts::PI * std::f64::consts::PI / 3.0;

/// Latent-scale ICC of a random-intercept logistic model: τ² / (π²/3 + τ²).
pub fn icc_from_tau2(tau2: f64) -> Result<f64> {
    if !(tau2 >= 0.0) || !tau2.is_finite() {
        return Err(Error::Argument(format!("tau2 must be a finite non-negative number, got {tau2}")));
    }
    Ok(tau2 / (LOGISTIC_RESIDUAL_VARIANCE + tau2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn standardize_examples() {
        let z = standardize(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(z, vec![-1.0, 0.0, 1.0]);
        let again = standardize(&z).unwrap();
        for (a, b) in z.iter().zip(&again) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(standardize(&[4.0, 4.0, 4.0]).is_err());
    }

    #[test]
    fn squeeze_examples() {
        assert_relative_eq!(squeeze_unit_interval(&[0.0], 10)[0], 0.05, epsilon = 1e-15);
        assert_relative_eq!(squeeze_unit_interval(&[1.0], 10)[0], 0.95, epsilon = 1e-15);
        for n in [1, 2, 17, 250] {
            assert_eq!(squeeze_unit_interval(&[0.5], n)[0], 0.5);
        }
    }

    #[test]
    fn icc_examples() {
        assert_eq!(icc_from_tau2(0.0).unwrap(), 0.0);
        assert_relative_eq!(icc_from_tau2(LOGISTIC_RESIDUAL_VARIANCE).unwrap(), 0.5, epsilon = 1e-15);
        assert!((icc_from_tau2(0.9279).unwrap() - 0.22).abs() < 5e-5);
        assert!(icc_from_tau2(-0.1).is_err());
    }

    #[test]
    fn frame_validation() {
        let x = DMatrix::from_element(2, 1, 1.0);
        let bad = Response::Counts { successes: vec![3, 1], trials: vec![2, 4] };
        assert!(ModelFrame::new(bad, x.clone(), vec!["(Intercept)".into()]).is_err());
        let ok = Response::Counts { successes: vec![1, 1], trials: vec![2, 4] };
        let f = ModelFrame::new(ok, x, vec!["(Intercept)".into()]).unwrap();
        assert!(f.clone().with_weights(vec![1.0, 0.0]).is_err());
        assert!(f.with_weights(vec![1.0, 2.0]).is_ok());
    }

    proptest! {
        #[test]
        fn icc_strictly_increasing(a in 0.0f64..50.0, d in 1e-6f64..10.0) {
            prop_assert!(icc_from_tau2(a + d).unwrap() > icc_from_tau2(a).unwrap());
        }

        #[test]
        fn standardized_has_unit_moments(v in proptest::collection::vec(-1e3f64..1e3, 3..40)) {
            prop_assume!(mean_sd(&v).1 > 1e-6);
            let z = standardize(&v).unwrap();
            let (m, s) = mean_sd(&z);
            prop_assert!(m.abs() < 1e-9);
            prop_assert!((s - 1.0).abs() < 1e-9);
        }
    }
}
