//! The four analysis methods applied to one simulated trial.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::census::CensusTable;
use crate::dgm::FollowUpRecord;
use crate::error::{Error, Result};
use crate::glmfit::{
    fit_beta_regression, fit_binomial_logistic, fit_linear, fit_quasibinomial, mean_sd, sandwich_covariance, squeeze_unit_interval,
    standardize, FitResult, ModelFrame, Response, VarianceSpec,
};

/// One-sided critical value calibrated for the IPTW test.
pub const IPTW_CRITICAL_VALUE: f64 = -1.811911;
const EXTREME_PROPENSITY: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    Beta,
    QuasiBinomial,
    #[serde(rename = "IPTW")]
    Iptw,
    Naive,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Beta, Method::QuasiBinomial, Method::Iptw, Method::Naive];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Beta => "Beta",
            Method::QuasiBinomial => "QuasiBinomial",
            Method::Iptw => "IPTW",
            Method::Naive => "Naive",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "beta" => Ok(Method::Beta),
            "quasibinomial" | "quasi-binomial" | "qb" => Ok(Method::QuasiBinomial),
            "iptw" => Ok(Method::Iptw),
            "naive" => Ok(Method::Naive),
            _ => Err(Error::Parse(format!("unknown method `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IptwMean {
    /// Normalized weights within each arm.
    #[default]
    Hajek,
    HorvitzThompson,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NaiveForm {
    /// Two-sample Wald test on village proportions, unpooled variance.
    #[default]
    Wald,
    /// Unadjusted quasi-binomial regression on arm.
    QuasiBinomial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HcFlavor {
    Hc0,
    Hc1,
    Hc3,
}

impl HcFlavor {
    fn spec(self) -> VarianceSpec {
        match self {
            HcFlavor::Hc0 => VarianceSpec::HC0,
            HcFlavor::Hc1 => VarianceSpec::HC1,
            HcFlavor::Hc3 => VarianceSpec::HC3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalysisOptions {
    pub alpha: f64,
    pub iptw_critical_value: f64,
    pub iptw_mean: IptwMean,
    pub iptw_variance: HcFlavor,
    pub naive_form: NaiveForm,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            iptw_critical_value: IPTW_CRITICAL_VALUE,
            iptw_mean: IptwMean::Hajek,
            iptw_variance: HcFlavor::Hc3,
            naive_form: NaiveForm::Wald,
        }
    }
}

/// Village-level analysis data for one simulated trial.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisInput {
    pub arm: Vec<u8>,
    pub baseline_rate: Vec<f64>,
    /// Population standardized within the trial sample.
    pub pop_std: Vec<f64>,
    pub distance: Vec<f64>,
    pub y1: Vec<u32>,
    pub m1: Vec<u32>,
}

impl AnalysisInput {
    pub fn new(arm: Vec<u8>, baseline_rate: Vec<f64>, population: &[f64], distance: Vec<f64>, y1: Vec<u32>, m1: Vec<u32>) -> Result<Self> {
        let n = arm.len();
        if [baseline_rate.len(), population.len(), distance.len(), y1.len(), m1.len()].iter().any(|&l| l != n) {
            return Err(Error::Argument("analysis input columns differ in length".into()));
        }
        if arm.iter().any(|&a| a > 1) {
            return Err(Error::Argument("arm must be 0 or 1".into()));
        }
        if y1.iter().zip(&m1).any(|(y, m)| y > m || *m == 0) {
            return Err(Error::Argument("follow-up counts need 0 <= y1 <= m1 and m1 > 0".into()));
        }
        let treated = arm.iter().filter(|&&a| a == 1).count();
        if treated == 0 || treated == n {
            return Err(Error::Argument("both arms must be nonempty".into()));
        }
        Ok(Self { arm, baseline_rate, pop_std: standardize(population)?, distance, y1, m1 })
    }

    pub fn from_records(records: &[FollowUpRecord], census: &CensusTable) -> Result<Self> {
        let rows: Vec<usize> = records
            .iter()
            .map(|r| census.position(r.village_id).ok_or_else(|| Error::Argument(format!("village {} not in census", r.village_id))))
            .collect::<Result<_>>()?;
        let pop: Vec<f64> = rows.iter().map(|&i| census.population[i]).collect();
        Self::new(
            records.iter().map(|r| r.arm).collect(),
            rows.iter().map(|&i| census.baseline_rate(i)).collect(),
            &pop,
            rows.iter().map(|&i| census.distance[i]).collect(),
            records.iter().map(|r| r.y1).collect(),
            records.iter().map(|r| r.m1).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.arm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arm.is_empty()
    }

    pub fn proportions(&self) -> Vec<f64> {
        self.y1.iter().zip(&self.m1).map(|(y, m)| f64::from(*y) / f64::from(*m)).collect()
    }

    fn arm_counts(&self) -> (usize, usize) {
        let t = self.arm.iter().filter(|&&a| a == 1).count();
        (self.len() - t, t)
    }

    fn outcome_design(&self) -> (DMatrix<f64>, Vec<String>) {
        let n = self.len();
        let x = DMatrix::from_fn(n, 6, |i, j| match j {
            0 => 1.0,
            1 => f64::from(self.arm[i]),
            2 => self.baseline_rate[i],
            3 => self.pop_std[i],
            4 => self.distance[i],
            _ => self.pop_std[i] * self.distance[i],
        });
        let names = ["intercept", "arm", "baseline_rate", "population_std", "distance_km", "population_std:distance_km"];
        (x, names.iter().map(|s| s.to_string()).collect())
    }

    fn propensity_design(&self) -> (DMatrix<f64>, Vec<String>) {
        let n = self.len();
        let x = DMatrix::from_fn(n, 5, |i, j| match j {
            0 => 1.0,
            1 => self.baseline_rate[i],
            2 => self.pop_std[i],
            3 => self.distance[i],
            _ => self.pop_std[i] * self.distance[i],
        });
        let names = ["intercept", "baseline_rate", "population_std", "distance_km", "population_std:distance_km"];
        (x, names.iter().map(|s| s.to_string()).collect())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Diagnostics {
    pub converged: bool,
    /// Why the method produced no usable test, if it did not.
    pub failure: Option<String>,
    pub extreme_propensity: bool,
    pub weight_min: Option<f64>,
    pub weight_max: Option<f64>,
    pub dispersion: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestResult {
    pub method: Method,
    pub estimate: f64,
    pub se: f64,
    pub statistic: f64,
    pub p_one_sided: f64,
    pub rejected: bool,
    pub critical_value: f64,
    pub diagnostics: Diagnostics,
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("standard normal")
}

fn lower_critical(alpha: f64) -> f64 {
    std_normal().inverse_cdf(alpha)
}

fn test_result(method: Method, estimate: f64, se: f64, critical: f64, diagnostics: Diagnostics) -> TestResult {
    let statistic = if se > 0.0 {
        estimate / se
    } else if estimate == 0.0 {
        0.0
    } else {
        estimate * f64::INFINITY
    };
    TestResult {
        method,
        estimate,
        se,
        statistic,
        p_one_sided: std_normal().cdf(statistic),
        rejected: statistic < critical,
        critical_value: critical,
        diagnostics,
    }
}

/// Flagged non-rejection for a method that could not be carried out.
fn failed(method: Method, critical: f64, reason: String, mut diagnostics: Diagnostics) -> TestResult {
    diagnostics.converged = false;
    diagnostics.failure = Some(reason);
    TestResult {
        method,
        estimate: f64::NAN,
        se: f64::NAN,
        statistic: f64::NAN,
        p_one_sided: 1.0,
        rejected: false,
        critical_value: critical,
        diagnostics,
    }
}

fn check_arm_sizes(input: &AnalysisInput, min: usize) -> Result<()> {
    let (c, t) = input.arm_counts();
    if c < min || t < min {
        return Err(Error::Argument(format!("each arm needs at least {min} villages")));
    }
    Ok(())
}

fn arm_coefficient(method: Method, fit: Result<FitResult>, se_of: impl FnOnce(&FitResult) -> Result<f64>, critical: f64) -> TestResult {
    let fit = match fit {
        Ok(f) => f,
        Err(e) => return failed(method, critical, e.to_string(), Diagnostics::default()),
    };
    let diagnostics = Diagnostics { converged: fit.converged, dispersion: Some(fit.dispersion), ..Default::default() };
    if !fit.converged {
        return failed(method, critical, "fit did not converge".into(), diagnostics);
    }
    match se_of(&fit) {
        Ok(se) if se.is_finite() && se > 0.0 => test_result(method, fit.coefficients[1], se, critical, diagnostics),
        Ok(se) => failed(method, critical, format!("unusable standard error {se}"), diagnostics),
        Err(e) => failed(method, critical, e.to_string(), diagnostics),
    }
}

/// Beta regression of squeezed village proportions; SE from the village
/// cluster-robust sandwich.
pub fn analyze_beta(input: &AnalysisInput, alpha: f64) -> Result<TestResult> {
    check_arm_sizes(input, 2)?;
    let critical = lower_critical(alpha);
    let y = squeeze_unit_interval(&input.proportions(), input.len());
    let (x, names) = input.outcome_design();
    let frame = ModelFrame::new(Response::Unit(y), x, names)?;
    let clusters: Vec<u64> = (0..input.len() as u64).collect();
    let fit = fit_beta_regression(&frame);
    Ok(arm_coefficient(
        Method::Beta,
        fit,
        |f| Ok(sandwich_covariance(f, &frame, &VarianceSpec::ClusterRobust(clusters))?[(1, 1)].sqrt()),
        critical,
    ))
}

/// Quasi-binomial regression of follow-up counts; dispersion-scaled SE.
pub fn analyze_quasibinomial(input: &AnalysisInput, alpha: f64) -> Result<TestResult> {
    check_arm_sizes(input, 2)?;
    let critical = lower_critical(alpha);
    let (x, names) = input.outcome_design();
    let frame = ModelFrame::new(Response::Counts { successes: input.y1.clone(), trials: input.m1.clone() }, x, names)?;
    Ok(arm_coefficient(Method::QuasiBinomial, fit_quasibinomial(&frame), |f| Ok(f.covariance[(1, 1)].sqrt()), critical))
}

#[derive(Debug, Clone)]
pub struct WeightVector {
    pub weights: Vec<f64>,
    pub propensity: FitResult,
    pub extreme_propensity: bool,
}

/// Inverse-probability-of-treatment weights from a logistic propensity model.
pub fn estimate_weights(input: &AnalysisInput) -> Result<WeightVector> {
    let (x, names) = input.propensity_design();
    let frame = ModelFrame::new(
        Response::Counts { successes: input.arm.iter().map(|&a| u32::from(a)).collect(), trials: vec![1; input.len()] },
        x,
        names,
    )?;
    let fit = fit_binomial_logistic(&frame)?;
    if !fit.converged {
        return Err(Error::Estimation("propensity model did not converge (separation)".into()));
    }
    let extreme = fit.fitted.iter().any(|&e| !(EXTREME_PROPENSITY..=1.0 - EXTREME_PROPENSITY).contains(&e));
    let weights: Vec<f64> =
        input.arm.iter().zip(fit.fitted.iter()).map(|(&a, &e)| if a == 1 { 1.0 / e } else { 1.0 / (1.0 - e) }).collect();
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::Estimation("non-finite IPTW weight".into()));
    }
    Ok(WeightVector { weights, propensity: fit, extreme_propensity: extreme })
}

/// Weighted difference in mean village proportions between arms.
pub fn iptw_difference(input: &AnalysisInput, weights: &[f64], mean: IptwMean) -> f64 {
    let p = input.proportions();
    let mut sum = [0.0; 2];
    let mut wsum = [0.0; 2];
    for i in 0..input.len() {
        let a = usize::from(input.arm[i]);
        sum[a] += weights[i] * p[i];
        wsum[a] += weights[i];
    }
    match mean {
        IptwMean::Hajek => sum[1] / wsum[1] - sum[0] / wsum[0],
        IptwMean::HorvitzThompson => (sum[1] - sum[0]) / input.len() as f64,
    }
}

/// IPTW risk difference with a heteroscedasticity-consistent SE from the
/// weighted regression of village proportion on arm.
pub fn analyze_iptw(input: &AnalysisInput, opts: &AnalysisOptions) -> Result<TestResult> {
    check_arm_sizes(input, 2)?;
    let critical = opts.iptw_critical_value;
    let wv = match estimate_weights(input) {
        Ok(w) => w,
        Err(e) => return Ok(failed(Method::Iptw, critical, e.to_string(), Diagnostics::default())),
    };
    let mut diagnostics = Diagnostics {
        converged: true,
        extreme_propensity: wv.extreme_propensity,
        weight_min: wv.weights.iter().copied().reduce(f64::min),
        weight_max: wv.weights.iter().copied().reduce(f64::max),
        ..Default::default()
    };
    let n = input.len();
    let x = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { f64::from(input.arm[i]) });
    let frame = ModelFrame::new(Response::Continuous(input.proportions()), x, vec!["intercept".into(), "arm".into()])?
        .with_weights(wv.weights.clone())?;
    let se = fit_linear(&frame).and_then(|fit| sandwich_covariance(&fit, &frame, &opts.iptw_variance.spec()));
    let se = match se {
        Ok(v) => v[(1, 1)].sqrt(),
        Err(e) => return Ok(failed(Method::Iptw, critical, e.to_string(), diagnostics)),
    };
    let delta = iptw_difference(input, &wv.weights, opts.iptw_mean);
    if !se.is_finite() {
        diagnostics.converged = false;
        return Ok(failed(Method::Iptw, critical, "non-finite standard error".into(), diagnostics));
    }
    Ok(test_result(Method::Iptw, delta, se, critical, diagnostics))
}

/// Unadjusted comparison of arms.
pub fn analyze_naive(input: &AnalysisInput, opts: &AnalysisOptions) -> Result<TestResult> {
    check_arm_sizes(input, 2)?;
    let critical = lower_critical(opts.alpha);
    match opts.naive_form {
        NaiveForm::Wald => {
            let p = input.proportions();
            let arm = |a: u8| p.iter().zip(&input.arm).filter(|(_, &x)| x == a).map(|(v, _)| *v).collect::<Vec<f64>>();
            let (p0, p1) = (arm(0), arm(1));
            let (m0, s0) = mean_sd(&p0);
            let (m1, s1) = mean_sd(&p1);
            let se = (s0 * s0 / p0.len() as f64 + s1 * s1 / p1.len() as f64).sqrt();
            Ok(test_result(Method::Naive, m1 - m0, se, critical, Diagnostics { converged: true, ..Default::default() }))
        }
        NaiveForm::QuasiBinomial => {
            let n = input.len();
            let x = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { f64::from(input.arm[i]) });
            let frame = ModelFrame::new(
                Response::Counts { successes: input.y1.clone(), trials: input.m1.clone() },
                x,
                vec!["intercept".into(), "arm".into()],
            )?;
            Ok(arm_coefficient(Method::Naive, fit_quasibinomial(&frame), |f| Ok(f.covariance[(1, 1)].sqrt()), critical))
        }
    }
}

pub fn analyze(method: Method, input: &AnalysisInput, opts: &AnalysisOptions) -> Result<TestResult> {
    match method {
        Method::Beta => analyze_beta(input, opts.alpha),
        Method::QuasiBinomial => analyze_quasibinomial(input, opts.alpha),
        Method::Iptw => analyze_iptw(input, opts),
        Method::Naive => analyze_naive(input, opts),
    }
}

/// OR = π₁(1 − π₀) / (π₀(1 − π₁)).
pub fn or_from_rates(pi1: f64, pi0: f64) -> Result<f64> {
    if !(pi1 > 0.0 && pi1 < 1.0 && pi0 > 0.0 && pi0 < 1.0) {
        return Err(Error::Argument(format!("rates must lie strictly inside (0,1), got {pi1}, {pi0}")));
    }
    Ok(pi1 * (1.0 - pi0) / (pi0 * (1.0 - pi1)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Two arms with the same village covariates; `treated_y` gives the
    /// follow-up counts in the treated arm.
    fn dataset(n_per_arm: usize, seed: u64, control_rate: f64, treated_rate: f64) -> AnalysisInput {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut arm = Vec::new();
        let mut base = Vec::new();
        let mut pop = Vec::new();
        let mut dist = Vec::new();
        let mut y = Vec::new();
        let mut m = Vec::new();
        for a in 0..2u8 {
            for _ in 0..n_per_arm {
                let mm: u32 = rng.random_range(10..40);
                let rate = if a == 1 { treated_rate } else { control_rate };
                let noise: f64 = rng.random_range(-0.05..0.05);
                arm.push(a);
                base.push(rng.random_range(0.05..0.5));
                pop.push(rng.random_range(100.0..2000.0));
                dist.push(rng.random_range(0.5..15.0));
                y.push((((rate + noise).clamp(0.0, 1.0)) * f64::from(mm)).round() as u32);
                m.push(mm);
            }
        }
        AnalysisInput::new(arm, base, &pop, dist, y, m).unwrap()
    }

    /// Treated villages are copies of the control villages.
    fn mirrored(n: usize, seed: u64) -> AnalysisInput {
        let d = dataset(n, seed, 0.2, 0.2);
        let half = |v: &Vec<f64>| v[..n].iter().chain(&v[..n]).copied().collect::<Vec<f64>>();
        let halfu = |v: &Vec<u32>| v[..n].iter().chain(&v[..n]).copied().collect::<Vec<u32>>();
        let mut pop_raw: Vec<f64> = (0..n).map(|i| 100.0 + 37.0 * i as f64).collect();
        pop_raw.extend(pop_raw.clone());
        AnalysisInput::new(d.arm.clone(), half(&d.baseline_rate), &pop_raw, half(&d.distance), halfu(&d.y1), halfu(&d.m1)).unwrap()
    }

    #[test]
    fn identical_arms_are_not_rejected() {
        let d = mirrored(30, 1);
        let opts = AnalysisOptions::default();
        for m in Method::ALL {
            let r = analyze(m, &d, &opts).unwrap();
            assert!(!r.rejected, "{m}");
            assert!(r.estimate.abs() < 1e-6, "{m}: {}", r.estimate);
        }
        assert_eq!(analyze_naive(&d, &opts).unwrap().statistic, 0.0);
        assert_eq!(analyze_iptw(&d, &opts).unwrap().estimate, 0.0);
    }

    #[test]
    fn separated_arms_are_rejected() {
        let d = dataset(30, 2, 0.40, 0.05);
        let opts = AnalysisOptions::default();
        for m in [Method::Beta, Method::QuasiBinomial, Method::Naive] {
            let r = analyze(m, &d, &opts).unwrap();
            assert!(r.rejected, "{m}: {r:?}");
            assert!(r.p_one_sided < 0.05);
        }
    }

    #[test]
    fn naive_wald_matches_hand_computation() {
        let d = AnalysisInput::new(
            vec![0, 0, 0, 1, 1, 1],
            vec![0.2; 6],
            &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
            vec![1.0; 6],
            vec![2, 2, 2, 1, 1, 1],
            vec![10, 10, 11, 10, 10, 9],
        )
        .unwrap();
        let p = d.proportions();
        let (m0, s0) = mean_sd(&p[..3]);
        let (m1, s1) = mean_sd(&p[3..]);
        let r = analyze_naive(&d, &AnalysisOptions::default()).unwrap();
        assert!((r.estimate - (m1 - m0)).abs() < 1e-15);
        assert!((r.se - (s0 * s0 / 3.0 + s1 * s1 / 3.0).sqrt()).abs() < 1e-15);
        assert!(r.rejected);
        assert!((r.critical_value + 1.6448536269514722).abs() < 1e-12);
    }

    #[test]
    fn quasibinomial_se_scales_binomial_se() {
        let d = dataset(25, 3, 0.2, 0.15);
        let (x, names) = d.outcome_design();
        let frame = ModelFrame::new(Response::Counts { successes: d.y1.clone(), trials: d.m1.clone() }, x, names).unwrap();
        let bin = fit_binomial_logistic(&frame).unwrap();
        let r = analyze_quasibinomial(&d, 0.05).unwrap();
        assert!((r.estimate - bin.coefficients[1]).abs() < 1e-12);
        let phi = r.diagnostics.dispersion.unwrap();
        assert!((r.se - bin.covariance[(1, 1)].sqrt() * phi.sqrt()).abs() < 1e-10);
    }

    #[test]
    fn weights_and_iptw_mean() {
        // one covariate pattern per arm mirrored, so the propensity is 1/2
        let d = mirrored(20, 4);
        let w = estimate_weights(&d).unwrap();
        assert!(w.weights.iter().all(|&x| (x - 2.0).abs() < 1e-8));
        let equal = vec![1.0; d.len()];
        let p = d.proportions();
        let (c, t) = (mean_sd(&p[..20]).0, mean_sd(&p[20..]).0);
        assert!((iptw_difference(&d, &equal, IptwMean::Hajek) - (t - c)).abs() < 1e-14);
    }

    #[test]
    fn iptw_se_uses_weighted_regression() {
        let d = dataset(30, 5, 0.2, 0.2);
        let w = estimate_weights(&d).unwrap();
        let r = analyze_iptw(&d, &AnalysisOptions::default()).unwrap();
        assert_eq!(r.critical_value, IPTW_CRITICAL_VALUE);
        // the WLS arm coefficient is the Hájek difference
        let n = d.len();
        let x = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { f64::from(d.arm[i]) });
        let frame = ModelFrame::new(Response::Continuous(d.proportions()), x, vec!["a".into(), "b".into()])
            .unwrap()
            .with_weights(w.weights.clone())
            .unwrap();
        let fit = fit_linear(&frame).unwrap();
        assert!((fit.coefficients[1] - r.estimate).abs() < 1e-12);
    }

    #[test]
    fn separation_is_a_flagged_non_rejection() {
        let mut d = dataset(10, 6, 0.3, 0.1);
        for i in 0..d.len() {
            d.distance[i] = if d.arm[i] == 1 { 10.0 + i as f64 } else { i as f64 * 0.1 };
        }
        let r = analyze_iptw(&d, &AnalysisOptions::default()).unwrap();
        assert!(!r.rejected);
        assert!(r.diagnostics.failure.is_some());
    }

    #[test]
    fn naive_quasibinomial_variant_runs() {
        let d = dataset(30, 7, 0.4, 0.05);
        let opts = AnalysisOptions { naive_form: NaiveForm::QuasiBinomial, ..Default::default() };
        let r = analyze_naive(&d, &opts).unwrap();
        assert!(r.rejected && r.estimate < 0.0);
    }

    #[test]
    fn or_examples() {
        assert_eq!(or_from_rates(0.3, 0.3).unwrap(), 1.0);
        assert!((or_from_rates(0.1, 0.2).unwrap() - 4.0 / 9.0).abs() < 1e-15);
        assert!(or_from_rates(0.0, 0.2).is_err());
        assert!(or_from_rates(0.2, 1.0).is_err());
    }

    fn permute(d: &AnalysisInput, perm: &[usize]) -> AnalysisInput {
        AnalysisInput {
            arm: perm.iter().map(|&i| d.arm[i]).collect(),
            baseline_rate: perm.iter().map(|&i| d.baseline_rate[i]).collect(),
            pop_std: perm.iter().map(|&i| d.pop_std[i]).collect(),
            distance: perm.iter().map(|&i| d.distance[i]).collect(),
            y1: perm.iter().map(|&i| d.y1[i]).collect(),
            m1: perm.iter().map(|&i| d.m1[i]).collect(),
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn row_permutation_invariance(seed in 0u64..1000, shuffle in 0u64..1000) {
            let d = dataset(15, seed, 0.25, 0.2);
            let mut perm: Vec<usize> = (0..d.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(shuffle);
            for i in (1..perm.len()).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let p = permute(&d, &perm);
            let opts = AnalysisOptions::default();
            for m in Method::ALL {
                let a = analyze(m, &d, &opts).unwrap();
                let b = analyze(m, &p, &opts).unwrap();
                prop_assert_eq!(a.rejected, b.rejected);
                if a.diagnostics.failure.is_none() {
                    prop_assert!((a.statistic - b.statistic).abs() <= 1e-6 * a.statistic.abs().max(1.0), "{} {} {}", m, a.statistic, b.statistic);
                }
            }
        }

        #[test]
        fn swapping_arms_flips_sign(seed in 0u64..1000) {
            let d = dataset(15, seed, 0.25, 0.15);
            let mut s = d.clone();
            for a in &mut s.arm { *a = 1 - *a; }
            let opts = AnalysisOptions::default();
            for m in Method::ALL {
                let a = analyze(m, &d, &opts).unwrap();
                let b = analyze(m, &s, &opts).unwrap();
                if a.diagnostics.failure.is_none() && b.diagnostics.failure.is_none() {
                    prop_assert!((a.estimate + b.estimate).abs() <= 1e-6 * a.estimate.abs().max(1e-3), "{} {} {}", m, a.estimate, b.estimate);
                }
            }
        }

        #[test]
        fn p_value_in_unit_interval(seed in 0u64..1000) {
            let d = dataset(12, seed, 0.3, 0.25);
            for m in Method::ALL {
                let r = analyze(m, &d, &AnalysisOptions::default()).unwrap();
                prop_assert!((0.0..=1.0).contains(&r.p_one_sided));
                prop_assert_eq!(r.rejected, r.statistic < r.critical_value);
            }
        }
    }
}
