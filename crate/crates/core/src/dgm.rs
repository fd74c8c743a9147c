//! Data-generating mechanism for follow-up Penta0 counts.

use rand::Rng;
use rand_distr::{Binomial, Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::allocation::{Allocation, AllocationPool};
use crate::census::CensusTable;
use crate::error::{Error, Result};
use crate::glmfit::special::{expit, logit};
use crate::glmfit::LOGISTIC_RESIDUAL_VARIANCE;
use crate::rng::{substream, text_key};

/// Population (per person) and distance (per km) log-odds effects.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoefSet {
    pub beta1_pop: f64,
    pub beta2_dist: f64,
}

/// Coefficient sets 1–3: baseline fit point estimates, then the two
/// confidence-limit combinations.
pub const COEF_SETS: [CoefSet; 3] = [
    CoefSet { beta1_pop: -0.00010860, beta2_dist: 0.074920 },
    CoefSet { beta1_pop: -0.00015608, beta2_dist: 0.061783 },
    CoefSet { beta1_pop: -0.00006112, beta2_dist: 0.088057 },
];

pub fn coef_set(index: u8) -> Result<CoefSet> {
    match index {
        1..=3 => Ok(COEF_SETS[usize::from(index) - 1]),
        _ => Err(Error::Argument(format!("coefficient set must be 1, 2 or 3, got {index}"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub delta_r: f64,
    pub pi0: f64,
    pub n_per_arm: usize,
    pub coef_set: u8,
    pub icc: f64,
}

impl ScenarioSpec {
    /// π₀ = 0.2, coefficient set 1, ICC 0.22.
    pub fn base_case(n_per_arm: usize, delta_r: f64) -> Self {
        Self { delta_r, pi0: 0.2, n_per_arm, coef_set: 1, icc: 0.22 }
    }

    pub fn tau2(&self) -> Result<f64> {
        tau2_from_icc(self.icc)
    }

    pub fn coefficients(&self) -> Result<CoefSet> {
        coef_set(self.coef_set)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.delta_r) {
            return Err(Error::Argument(format!("delta_r must lie in [0,1), got {}", self.delta_r)));
        }
        if !(self.pi0 > 0.0 && self.pi0 < 1.0) {
            return Err(Error::Argument(format!("pi0 must lie in (0,1), got {}", self.pi0)));
        }
        if self.n_per_arm < 2 {
            return Err(Error::Argument("n_per_arm must be at least 2".into()));
        }
        self.coefficients()?;
        self.tau2()?;
        Ok(())
    }

    /// Stable identifier used in result files and seed derivation.
    pub fn id(&self) -> String {
        format!("d{}_pi{}_n{}_c{}_icc{:.4}", self.delta_r, self.pi0, self.n_per_arm, self.coef_set, self.icc)
    }

    /// Scenario without the sample size, the unit of DGM calibration reuse.
    pub fn dgm_key(&self) -> String {
        format!("pi{}_c{}_icc{:.4}", self.pi0, self.coef_set, self.icc)
    }
}

/// τ² = ICC·(π²/3)/(1 − ICC).
pub fn tau2_from_icc(icc: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&icc) {
        return Err(Error::Argument(format!("icc must lie in [0,1), got {icc}")));
    }
    Ok(icc * LOGISTIC_RESIDUAL_VARIANCE / (1.0 - icc))
}

/// θ = logit(π₀(1 − δ_r)) − logit(π₀).
pub fn treatment_logit_shift(delta_r: f64, pi0: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&delta_r) || !(pi0 > 0.0 && pi0 < 1.0) {
        return Err(Error::Argument(format!("need 0 <= delta_r < 1 and 0 < pi0 < 1, got {delta_r}, {pi0}")));
    }
    let treated = pi0 * (1.0 - delta_r);
    if treated <= 0.0 {
        return Err(Error::Argument("treated rate underflows to zero".into()));
    }
    Ok(logit(treated) - logit(pi0))
}

/// Baseline log-odds with Haldane-style guarding of 0 and m counts.
pub fn baseline_offset(y0: u32, m0: u32) -> f64 {
    let m = f64::from(m0);
    let y = if y0 == 0 {
        0.5
    } else if y0 == m0 {
        m - 0.5
    } else {
        f64::from(y0)
    };
    (y / (m - y)).ln()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FollowUpSize {
    /// m¹ = m⁰.
    #[default]
    Baseline,
    /// m¹ ~ Poisson(m⁰), at least 1.
    Poisson,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibratedDgm {
    pub beta0: f64,
    pub theta: f64,
    pub beta1_pop: f64,
    pub beta2_dist: f64,
    pub tau2: f64,
    /// |marginal control rate − π₀| on an independent Monte Carlo sample.
    pub calibration_error: f64,
    pub follow_up_size: FollowUpSize,
}

impl CalibratedDgm {
    /// Same calibration with another effect size.
    pub fn with_delta(&self, delta_r: f64, pi0: f64) -> Result<Self> {
        Ok(Self { theta: treatment_logit_shift(delta_r, pi0)?, ..*self })
    }

    fn fixed_part(&self, census: &CensusTable, i: usize) -> f64 {
        baseline_offset(census.penta0[i], census.children[i])
            + self.beta1_pop * census.population[i]
            + self.beta2_dist * census.distance[i]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationOptions {
    /// Simulated control-village draws (at least 10⁵ recommended).
    pub village_draws: usize,
    pub tolerance: f64,
    pub follow_up_size: FollowUpSize,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self { village_draws: 100_000, tolerance: 0.002, follow_up_size: FollowUpSize::Baseline }
    }
}

/// Control-arm village draws: pool members chosen uniformly, every control
/// village of a member taken, each paired with a standard-normal intercept.
fn control_draws(census: &CensusTable, pool: &AllocationPool, draws: usize, seed: u64, stream: u64) -> Result<Vec<(usize, f64)>> {
    let mut rng = substream(&[text_key("calibration"), seed, stream]);
    let mut out = Vec::with_capacity(draws + pool.spec.villages_per_arm);
    while out.len() < draws {
        let a = &pool.accepted[rng.random_range(0..pool.accepted.len())];
        for id in &a.control_ids {
            let i = census.position(*id).ok_or_else(|| Error::Calibration(format!("pool village {id} missing from census")))?;
            out.push((i, rng.sample::<f64, _>(StandardNormal)));
        }
    }
    Ok(out)
}

fn marginal_rate(fixed: &[f64], z: &[f64], beta0: f64, tau: f64) -> f64 {
    fixed.iter().zip(z).map(|(f, z)| expit(beta0 + tau * z + f)).sum::<f64>() / fixed.len() as f64
}

/// Finds β₀ such that the mean control-village π equals π₀, by bisection on
/// common random numbers, then measures the error on a fresh sample.
pub fn calibrate_intercept(
    census: &CensusTable,
    pool: &AllocationPool,
    scenario: &ScenarioSpec,
    seed: u64,
    opts: &CalibrationOptions,
) -> Result<CalibratedDgm> {
    calibrate_with_coefficients(census, pool, scenario, scenario.coefficients()?, seed, opts)
}

/// As [`calibrate_intercept`] with explicit covariate effects.
pub fn calibrate_with_coefficients(
    census: &CensusTable,
    pool: &AllocationPool,
    scenario: &ScenarioSpec,
    coefs: CoefSet,
    seed: u64,
    opts: &CalibrationOptions,
) -> Result<CalibratedDgm> {
    scenario.validate()?;
    if pool.accepted.is_empty() {
        return Err(Error::Calibration("allocation pool is empty".into()));
    }
    let tau2 = scenario.tau2()?;
    let tau = tau2.sqrt();
    let mut dgm = CalibratedDgm {
        beta0: 0.0,
        theta: treatment_logit_shift(scenario.delta_r, scenario.pi0)?,
        beta1_pop: coefs.beta1_pop,
        beta2_dist: coefs.beta2_dist,
        tau2,
        calibration_error: f64::NAN,
        follow_up_size: opts.follow_up_size,
    };
    let proto = dgm;
    let sample = |stream: u64| -> Result<(Vec<f64>, Vec<f64>)> {
        let draws = control_draws(census, pool, opts.village_draws.max(1), seed, stream)?;
        Ok(draws.iter().map(|&(i, z)| (proto.fixed_part(census, i), z)).unzip())
    };
    let (fixed, z) = sample(0)?;
    let (mut lo, mut hi) = (-10.0, 10.0);
    let target = scenario.pi0;
    if marginal_rate(&fixed, &z, lo, tau) > target || marginal_rate(&fixed, &z, hi, tau) < target {
        return Err(Error::Calibration(format!("no intercept in [-10, 10] gives a control rate of {target}")));
    }
    while hi - lo > 1e-12 {
        let mid = 0.5 * (lo + hi);
        if marginal_rate(&fixed, &z, mid, tau) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    dgm.beta0 = 0.5 * (lo + hi);
    let (fixed2, z2) = sample(1)?;
    dgm.calibration_error = (marginal_rate(&fixed2, &z2, dgm.beta0, tau) - target).abs();
    if dgm.calibration_error > opts.tolerance {
        return Err(Error::Calibration(format!(
            "calibrated control rate misses {target} by {:.4} (tolerance {})",
            dgm.calibration_error, opts.tolerance
        )));
    }
    Ok(dgm)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FollowUpRecord {
    pub village_id: u32,
    pub m1: u32,
    pub y1: u32,
    pub arm: u8,
}

/// Follow-up counts for every allocated village, controls first, each arm in
/// ascending id order.
pub fn generate_outcomes<R: Rng>(
    allocation: &Allocation,
    census: &CensusTable,
    dgm: &CalibratedDgm,
    rng: &mut R,
) -> Result<Vec<FollowUpRecord>> {
    let tau = dgm.tau2.sqrt();
    let mut out = Vec::with_capacity(allocation.control_ids.len() + allocation.intervention_ids.len());
    for (arm, ids) in [(0u8, &allocation.control_ids), (1u8, &allocation.intervention_ids)] {
        for &id in ids {
            let i = census.position(id).ok_or_else(|| Error::Argument(format!("village {id} not in census")))?;
            let z: f64 = rng.sample(StandardNormal);
            let eta = dgm.beta0 + tau * z + dgm.fixed_part(census, i) + dgm.theta * f64::from(arm);
            let pi = expit(eta);
            let m0 = census.children[i];
            let m1 = match dgm.follow_up_size {
                FollowUpSize::Baseline => m0,
                FollowUpSize::Poisson => {
                    let draw: f64 = Poisson::new(f64::from(m0)).map_err(|e| Error::Argument(e.to_string()))?.sample(rng);
                    (draw as u32).max(1)
                }
            };
            let y1 = Binomial::new(u64::from(m1), pi).map_err(|e| Error::Argument(e.to_string()))?.sample(rng) as u32;
            out.push(FollowUpRecord { village_id: id, m1, y1, arm });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::allocation::{build_pool, AllocationSpec};
    use crate::census::{synthesize_census, CensusSpec, Group, Village};
    use crate::glmfit::icc_from_tau2;
    use proptest::prelude::*;
    use rand::Rng;
    use std::sync::OnceLock;

    fn base() -> &'static (CensusTable, AllocationPool) {
        static CELL: OnceLock<(CensusTable, AllocationPool)> = OnceLock::new();
        CELL.get_or_init(|| {
            let t = CensusTable::new(&synthesize_census(&CensusSpec::default()).unwrap()).unwrap();
            let mut spec = AllocationSpec::new(50);
            spec.max_draws = 50_000;
            let pool = build_pool(&t, &spec, 7).unwrap();
            (t, pool)
        })
    }

    #[test]
    fn tau2_examples() {
        assert_eq!(tau2_from_icc(0.0).unwrap(), 0.0);
        assert!((tau2_from_icc(0.5).unwrap() - LOGISTIC_RESIDUAL_VARIANCE).abs() < 1e-15);
        assert!((tau2_from_icc(0.22).unwrap() - 0.92790).abs() < 1e-4);
        assert!(tau2_from_icc(1.0).is_err());
    }

    #[test]
    fn shift_examples() {
        assert_eq!(treatment_logit_shift(0.0, 0.2).unwrap(), 0.0);
        let oracle = |a: f64, b: f64| (a / (1.0 - a)).ln() - (b / (1.0 - b)).ln();
        assert!((treatment_logit_shift(0.5, 0.2).unwrap() - oracle(0.1, 0.2)).abs() < 1e-14);
        assert!((treatment_logit_shift(0.5, 0.2).unwrap() + 0.8109302).abs() < 1e-6);
        assert!((treatment_logit_shift(0.375, 0.2).unwrap() + 0.5596158).abs() < 1e-6);
        assert!(treatment_logit_shift(1.0, 0.2).is_err());
    }

    #[test]
    fn offsets_are_finite_at_the_edges() {
        assert!((baseline_offset(0, 10) - (0.5f64 / 9.5).ln()).abs() < 1e-15);
        assert!((baseline_offset(10, 10) - (9.5f64 / 0.5).ln()).abs() < 1e-15);
        assert!((baseline_offset(3, 10) - (3.0f64 / 7.0).ln()).abs() < 1e-15);
    }

    #[test]
    fn closed_form_calibration_without_variation() {
        // every village at rate 0.5 so the offset vanishes
        let mut vs = Vec::new();
        for (g, area) in [(Group::Control, "A"), (Group::Intervention, "B")] {
            for k in 0..10 {
                vs.push(Village {
                    id: vs.len() as u32 + 1,
                    health_area: area.into(),
                    group: g,
                    population: Some(100.0 + k as f64),
                    distance_km: 1.0 + k as f64,
                    children_12_24: 10,
                    penta0_count: 5,
                    children_6_59: None,
                });
            }
        }
        let t = CensusTable::new(&vs).unwrap();
        let mut aspec = AllocationSpec::new(5);
        aspec.max_draws = 10;
        aspec.smd_threshold = f64::INFINITY;
        let pool = build_pool(&t, &aspec, 1).unwrap();
        let zero = CoefSet { beta1_pop: 0.0, beta2_dist: 0.0 };
        for pi0 in [0.15, 0.2, 0.3] {
            let scenario = ScenarioSpec { delta_r: 0.0, pi0, n_per_arm: 5, coef_set: 1, icc: 0.0 };
            let opts = CalibrationOptions { village_draws: 100, ..Default::default() };
            let dgm = calibrate_with_coefficients(&t, &pool, &scenario, zero, 1, &opts).unwrap();
            assert!((dgm.beta0 - logit(pi0)).abs() < 1e-10);
            assert!(dgm.calibration_error < 1e-10);
        }
    }

    #[test]
    fn offset_only_identity() {
        let (t, pool) = base();
        let dgm = CalibratedDgm {
            beta0: 0.0,
            theta: 0.0,
            beta1_pop: 0.0,
            beta2_dist: 0.0,
            tau2: 0.0,
            calibration_error: 0.0,
            follow_up_size: FollowUpSize::Baseline,
        };
        for a in pool.accepted.iter().take(5) {
            for id in a.control_ids.iter().chain(&a.intervention_ids) {
                let i = t.position(*id).unwrap();
                let (y, m) = (t.penta0[i], t.children[i]);
                if y > 0 && y < m {
                    assert!((expit(dgm.fixed_part(t, i)) - t.baseline_rate(i)).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn base_case_calibration_self_check_and_stability() {
        let (t, pool) = base();
        let sc = ScenarioSpec::base_case(50, 0.0);
        let opts = CalibrationOptions::default();
        let a = calibrate_intercept(t, pool, &sc, 100, &opts).unwrap();
        let b = calibrate_intercept(t, pool, &sc, 200, &opts).unwrap();
        assert!((a.beta0 - b.beta0).abs() <= 0.01, "{} vs {}", a.beta0, b.beta0);
        assert!(a.calibration_error <= 0.002);
        // fresh-seed simulation of control villages
        let mut rng = substream(&[99]);
        let mut sum = 0.0;
        let mut count = 0usize;
        while count < 100_000 {
            let alloc = &pool.accepted[rng.random_range(0..pool.accepted.len())];
            for id in &alloc.control_ids {
                let i = t.position(*id).unwrap();
                let z: f64 = rng.sample(StandardNormal);
                sum += expit(a.beta0 + a.tau2.sqrt() * z + a.fixed_part(t, i));
                count += 1;
            }
        }
        let rate = sum / count as f64;
        assert!((0.198..=0.202).contains(&rate), "{rate}");
    }

    #[test]
    fn strong_effect_empties_treated_arm() {
        let (t, pool) = base();
        let sc = ScenarioSpec::base_case(50, 0.0);
        let mut dgm = calibrate_intercept(t, pool, &sc, 1, &CalibrationOptions::default()).unwrap();
        dgm.theta = -10.0;
        let mut rng = substream(&[4]);
        let mut treated = 0;
        let mut total = 0;
        for a in pool.accepted.iter().take(20) {
            for r in generate_outcomes(a, t, &dgm, &mut rng).unwrap() {
                if r.arm == 1 {
                    treated += r.y1;
                    total += r.m1;
                }
            }
        }
        assert!(f64::from(treated) / f64::from(total) < 0.01);
    }

    #[test]
    fn generation_is_deterministic_and_valid() {
        let (t, pool) = base();
        let sc = ScenarioSpec::base_case(50, 0.25);
        let mut dgm = calibrate_intercept(t, pool, &sc, 1, &CalibrationOptions::default()).unwrap();
        let a = &pool.accepted[0];
        let x = generate_outcomes(a, t, &dgm, &mut substream(&[1, 2])).unwrap();
        let y = generate_outcomes(a, t, &dgm, &mut substream(&[1, 2])).unwrap();
        assert_eq!(x, y);
        assert_eq!(x.len(), 100);
        assert!(x.iter().all(|r| r.y1 <= r.m1));
        dgm.follow_up_size = FollowUpSize::Poisson;
        let p = generate_outcomes(a, t, &dgm, &mut substream(&[1, 2])).unwrap();
        assert!(p.iter().all(|r| r.m1 >= 1 && r.y1 <= r.m1));
    }

    proptest! {
        #[test]
        fn icc_round_trip(t2 in 0.0f64..50.0) {
            let back = tau2_from_icc(icc_from_tau2(t2).unwrap()).unwrap();
            prop_assert!((back - t2).abs() <= 1e-12 * t2.max(1.0));
        }

        #[test]
        fn shift_decreasing(pi0 in 0.01f64..0.99, d in 0.0f64..0.98, step in 1e-4f64..0.01) {
            prop_assert!(treatment_logit_shift(d + step, pi0).unwrap() < treatment_logit_shift(d, pi0).unwrap());
        }
    }
}
