//! E-values and bias-adjusted estimates for unmeasured confounding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EValueReport {
    pub input_or: f64,
    /// max(OR, 1/OR)
    pub b: f64,
    pub evalue: f64,
}

/// Approximate E-value for an odds ratio: E = √b + sqrt(√b(√b − 1)).
pub fn evalue_from_or(or_hat: f64) -> Result<EValueReport> {
    if !(or_hat > 0.0 && or_hat.is_finite()) {
        return Err(Error::Argument(format!("odds ratio must be positive and finite, got {or_hat}")));
    }
    let b = or_hat.max(1.0 / or_hat);
    let r = b.sqrt();
    Ok(EValueReport { input_or: or_hat, b, evalue: r + (r * (r - 1.0)).sqrt() })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdjustmentVariant {
    /// Bounding factor squared.
    #[default]
    Squared,
    /// Standard (unsquared) bounding factor.
    Unsquared,
}

impl AdjustmentVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            AdjustmentVariant::Squared => "squared",
            AdjustmentVariant::Unsquared => "unsquared",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiasAdjustment {
    pub r_ct: f64,
    pub r_co: f64,
    pub factor: f64,
    pub adjusted: f64,
    pub variant: AdjustmentVariant,
}

pub fn adjustment_factor(r_ct: f64, r_co: f64, variant: AdjustmentVariant) -> Result<f64> {
    if !(r_ct >= 1.0 && r_co >= 1.0) {
        return Err(Error::Argument(format!("risk ratios must be >= 1, got r_ct = {r_ct}, r_co = {r_co}")));
    }
    let f = (r_ct + r_co - 1.0) / (r_ct * r_co);
    Ok(match variant {
        AdjustmentVariant::Squared => f * f,
        AdjustmentVariant::Unsquared => f,
    })
}

/// β̂·((R_CT + R_CO − 1)/(R_CT·R_CO))², or the unsquared variant.
pub fn bias_adjusted_estimate_with(beta_hat: f64, r_ct: f64, r_co: f64, variant: AdjustmentVariant) -> Result<BiasAdjustment> {
    if !(beta_hat > 0.0 && beta_hat.is_finite()) {
        return Err(Error::Argument(format!("estimate must be positive, got {beta_hat}")));
    }
    let factor = adjustment_factor(r_ct, r_co, variant)?;
    Ok(BiasAdjustment { r_ct, r_co, factor, adjusted: beta_hat * factor, variant })
}

pub fn bias_adjusted_estimate(beta_hat: f64, r_ct: f64, r_co: f64) -> Result<f64> {
    Ok(bias_adjusted_estimate_with(beta_hat, r_ct, r_co, AdjustmentVariant::Squared)?.adjusted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn evalue_examples() {
        assert_eq!(evalue_from_or(1.0).unwrap().evalue, 1.0);
        let e4 = evalue_from_or(4.0).unwrap();
        assert_eq!(e4.b, 4.0);
        assert!((e4.evalue - (2.0 + 2f64.sqrt())).abs() < 1e-12);
        assert!((evalue_from_or(0.25).unwrap().evalue - e4.evalue).abs() < 1e-12);
        assert!(evalue_from_or(0.0).is_err());
        assert!(evalue_from_or(-1.0).is_err());
    }

    #[test]
    fn bias_adjustment_examples() {
        assert_eq!(bias_adjusted_estimate(0.7, 1.0, 3.0).unwrap(), 0.7);
        assert_eq!(bias_adjusted_estimate(0.7, 5.0, 1.0).unwrap(), 0.7);
        assert!((bias_adjusted_estimate(0.5, 2.0, 2.0).unwrap() - 0.28125).abs() < 1e-15);
        let un = bias_adjusted_estimate_with(0.5, 2.0, 2.0, AdjustmentVariant::Unsquared).unwrap();
        assert!((un.adjusted - 0.375).abs() < 1e-15);
        // other ratio very large: factor tends to (1/r)^2
        let f = adjustment_factor(2.0, 1e6, AdjustmentVariant::Squared).unwrap();
        assert!((f - 0.25).abs() < 1e-5);
        assert!(bias_adjusted_estimate(0.5, 0.9, 2.0).is_err());
    }

    proptest! {
        #[test]
        fn evalue_reciprocal_symmetry(x in 1e-4f64..1e4) {
            let a = evalue_from_or(x).unwrap().evalue;
            let b = evalue_from_or(1.0 / x).unwrap().evalue;
            prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
            prop_assert!(a >= 1.0);
        }

        #[test]
        fn evalue_increasing_in_b(b in 1.0f64..1e3, step in 1e-3f64..10.0) {
            prop_assert!(evalue_from_or(b + step).unwrap().evalue > evalue_from_or(b).unwrap().evalue);
        }

        #[test]
        fn factor_in_unit_interval_and_monotone(r1 in 1.0f64..50.0, r2 in 1.0f64..50.0, bump in 0.0f64..5.0) {
            for v in [AdjustmentVariant::Squared, AdjustmentVariant::Unsquared] {
                let f = adjustment_factor(r1, r2, v).unwrap();
                prop_assert!(f > 0.0 && f <= 1.0);
                prop_assert!(adjustment_factor(r1 + bump, r2, v).unwrap() <= f + 1e-15);
                prop_assert!(adjustment_factor(r1, r2 + bump, v).unwrap() <= f + 1e-15);
            }
        }
    }
}
