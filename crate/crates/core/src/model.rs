//! Customer behavioral model: quadratic consumption utility, the linear
//! price response it induces, and noisy realized curtailments.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};

/// Customer identifier, stable across a scenario.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct CustomerId(pub u32);

impl fmt::Display for CustomerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Coefficients of the quadratic consumption utility.
///
/// `alpha1` is the curvature in $/(kWh·kW) and must be positive so the
/// customer's trade-off has a unique minimizer; `alpha0` is the linear
/// coefficient in $/kWh.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaParams {
    pub alpha1: f64,
    pub alpha0: f64,
}

impl AlphaParams {
    pub fn new(alpha1: f64, alpha0: f64) -> Result<Self> {
        if !(alpha1 > 0.0) || !alpha1.is_finite() || !alpha0.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "utility curvature must be positive and finite, got alpha1={alpha1}"
            )));
        }
        Ok(Self { alpha1, alpha0 })
    }

    /// Dollar-valued dissatisfaction for curtailing `x` kW.
    pub fn utility(&self, x: f64) -> f64 {
        0.5 * self.alpha1 * x * x + self.alpha0 * x
    }

    pub fn to_beta(&self) -> BetaParams {
        BetaParams {
            beta1: 1.0 / self.alpha1,
            beta0: -self.alpha0 / self.alpha1,
        }
    }
}

/// Linear price-response model: curtailment = `beta1`·incentive + `beta0`.
///
/// `beta1` is the price sensitivity in kW per $/kWh, `beta0` the intercept
/// in kW. Estimates produced by the learner may transiently carry negative
/// slopes; the truth models used in scenarios keep `beta1 > 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaParams {
    pub beta1: f64,
    pub beta0: f64,
}

impl BetaParams {
    pub fn new(beta1: f64, beta0: f64) -> Self {
        Self { beta1, beta0 }
    }

    /// Curtailment a rational customer offers at incentive `lambda` ($/kWh),
    /// unconstrained by capacity.
    pub fn response(&self, lambda: f64) -> Result<f64> {
        check_lambda(lambda)?;
        Ok(self.beta1 * lambda + self.beta0)
    }

    /// Same as [`response`](Self::response) but clipped to the physical
    /// curtailment range `[0, x_max]`.
    pub fn response_capped(&self, lambda: f64, x_max: f64) -> Result<f64> {
        Ok(clip_to_capacity(self.response(lambda)?, x_max))
    }

    /// Converts back to utility coefficients. Fails when the slope is not
    /// positive (the quadratic utility would lose convexity).
    pub fn to_alpha(&self) -> Result<AlphaParams> {
        if !(self.beta1 > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "price sensitivity must be positive to recover utility coefficients, got beta1={}",
                self.beta1
            )));
        }
        let alpha1 = 1.0 / self.beta1;
        AlphaParams::new(alpha1, -self.beta0 * alpha1)
    }
}

impl TryFrom<AlphaParams> for BetaParams {
    type Error = Error;

    fn try_from(alpha: AlphaParams) -> Result<Self> {
        // AlphaParams enforces alpha1 > 0 on construction, but raw structs
        // can be built directly; re-check.
        if !(alpha.alpha1 > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "utility curvature must be positive, got alpha1={}",
                alpha.alpha1
            )));
        }
        Ok(alpha.to_beta())
    }
}

/// Ground-truth behavior of one customer in a scenario.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CustomerTruth {
    pub id: CustomerId,
    pub beta: BetaParams,
    /// Maximum curtailment capacity, kW.
    pub x_max: f64,
    /// Standard deviation of the response disturbance, kW.
    pub noise_sigma: f64,
}

impl CustomerTruth {
    pub fn new(id: CustomerId, beta: BetaParams, x_max: f64, noise_sigma: f64) -> Result<Self> {
        if !(x_max > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "curtailment capacity must be positive, got x_max={x_max}"
            )));
        }
        if noise_sigma < 0.0 || !noise_sigma.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "noise level must be nonnegative, got noise_sigma={noise_sigma}"
            )));
        }
        Ok(Self {
            id,
            beta,
            x_max,
            noise_sigma,
        })
    }

    /// Noise-free response, clipped to `[0, x_max]`.
    pub fn expected_response(&self, lambda: f64) -> Result<f64> {
        self.beta.response_capped(lambda, self.x_max)
    }

    /// Response with the per-event disturbance applied, clipped to
    /// `[0, x_max]`. Deterministic for a fixed random source state.
    pub fn realized_response<R: Rng + ?Sized>(&self, lambda: f64, rng: &mut R) -> Result<f64> {
        let base = self.beta.response(lambda)?;
        let noisy = if self.noise_sigma > 0.0 {
            let dist = Normal::new(0.0, self.noise_sigma).expect("sigma validated nonnegative");
            base + dist.sample(rng)
        } else {
            base
        };
        Ok(clip_to_capacity(noisy, self.x_max))
    }
}

/// One demand-response event: the broadcast incentive and the curtailment
/// recorded for each participating customer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DREventRecord {
    pub event_index: usize,
    /// Broadcast incentive, $/kWh.
    pub lambda: f64,
    /// Recorded curtailments, kW, keyed by customer.
    pub curtailments: BTreeMap<CustomerId, f64>,
}

impl DREventRecord {
    pub fn new(
        event_index: usize,
        lambda: f64,
        curtailments: BTreeMap<CustomerId, f64>,
    ) -> Result<Self> {
        check_lambda(lambda)?;
        for (id, &x) in &curtailments {
            if x < 0.0 || !x.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "curtailment for customer {id} must be nonnegative, got {x}"
                )));
            }
        }
        Ok(Self {
            event_index,
            lambda,
            curtailments,
        })
    }

    pub fn total_curtailment(&self) -> f64 {
        self.curtailments.values().sum()
    }
}

pub(crate) fn check_lambda(lambda: f64) -> Result<()> {
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "incentive must be nonnegative and finite, got lambda={lambda}"
        )));
    }
    Ok(())
}

/// Clips a curtailment into the physical range `[0, x_max]`.
pub fn clip_to_capacity(x: f64, x_max: f64) -> f64 {
    x.clamp(0.0, x_max)
}

/// Rounds to nine significant digits. Applied to every number the library
/// serializes so that a save/load cycle reproduces values exactly.
pub fn round_sig9(v: f64) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return v;
    }
    format!("{v:.8e}").parse().expect("formatted float reparses")
}
