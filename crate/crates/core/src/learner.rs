//! Exploration stage of the aggregator: estimating per-customer price
//! response from recorded events, either in batch (ordinary least squares)
//! or incrementally (online gradient descent).

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{BetaParams, CustomerId, DREventRecord};

/// Variance threshold below which the incentive design is treated as
/// degenerate (single event or constant incentives) and the fit falls back
/// to a flat line through the mean response.
pub const DEGENERATE_DESIGN_TOL: f64 = 1e-12;

/// Ordered (incentive, curtailment) observations for one customer.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CustomerHistory {
    pub pairs: Vec<(f64, f64)>,
}

impl CustomerHistory {
    pub fn new(pairs: Vec<(f64, f64)>) -> Self {
        Self { pairs }
    }

    pub fn push(&mut self, lambda: f64, x: f64) {
        self.pairs.push((lambda, x));
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Running sums for a least-squares line fit, cheap to extend one
/// observation at a time. Used both for whole-history fits and for the
/// prefix fits the valuation module performs in bulk.
#[derive(Debug, Clone, Copy, Default)]
pub struct OlsAccumulator {
    n: usize,
    sum_l: f64,
    sum_x: f64,
    sum_ll: f64,
    sum_lx: f64,
}

impl OlsAccumulator {
    pub fn add(&mut self, lambda: f64, x: f64) {
        self.n += 1;
        self.sum_l += lambda;
        self.sum_x += x;
        self.sum_ll += lambda * lambda;
        self.sum_lx += lambda * x;
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Closed-form slope and intercept. `None` for an empty accumulator;
    /// the degenerate fallback (zero slope, mean response) when the
    /// incentive variance is below [`DEGENERATE_DESIGN_TOL`].
    pub fn fit(&self) -> Option<BetaParams> {
        if self.n == 0 {
            return None;
        }
        let n = self.n as f64;
        let mean_l = self.sum_l / n;
        let mean_x = self.sum_x / n;
        let var_l = self.sum_ll / n - mean_l * mean_l;
        if var_l < DEGENERATE_DESIGN_TOL {
            return Some(BetaParams::new(0.0, mean_x));
        }
        let beta1 = (self.sum_lx / n - mean_x * mean_l) / var_l;
        Some(BetaParams::new(beta1, mean_x - beta1 * mean_l))
    }
}

/// Mean squared residual of `beta` on the history, halved.
pub fn empirical_loss(history: &CustomerHistory, beta: &BetaParams) -> Result<f64> {
    if history.is_empty() {
        return Err(Error::InvalidInput(
            "empirical loss needs at least one observation".into(),
        ));
    }
    let t = history.len() as f64;
    let sum: f64 = history
        .pairs
        .iter()
        .map(|&(lambda, x)| {
            let r = x - beta.beta1 * lambda - beta.beta0;
            r * r
        })
        .sum();
    Ok(sum / (2.0 * t))
}

/// Least-squares fit over the whole history.
pub fn batch_ols(history: &CustomerHistory) -> Result<BetaParams> {
    if history.is_empty() {
        return Err(Error::InvalidInput(
            "least-squares fit needs at least one observation".into(),
        ));
    }
    let mut acc = OlsAccumulator::default();
    for &(lambda, x) in &history.pairs {
        acc.add(lambda, x);
    }
    Ok(acc.fit().expect("nonempty accumulator"))
}

/// One online gradient step on the squared residual of a single
/// observation. The residual scales both coefficients; the slope component
/// is additionally scaled by the incentive.
pub fn ogd_step(beta: &BetaParams, lambda: f64, x: f64, eta: f64) -> Result<BetaParams> {
    if !(eta > 0.0) || !eta.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "learning rate must be positive, got eta={eta}"
        )));
    }
    crate::model::check_lambda(lambda)?;
    let residual = beta.beta0 + beta.beta1 * lambda - x;
    Ok(BetaParams::new(
        beta.beta1 - eta * residual * lambda,
        beta.beta0 - eta * residual,
    ))
}

/// Evolving per-customer estimates held by the aggregator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LearnerState {
    pub estimates: BTreeMap<CustomerId, BetaParams>,
    /// Online learning rate, dimensionless.
    pub eta: f64,
    /// Number of events folded into the estimates by online updates.
    pub events_seen: usize,
    /// When enabled, online updates run on incentives and responses scaled
    /// by their running means. Off by default; estimates are always exposed
    /// in natural units.
    pub feature_scaling: bool,
    scale_stats: ScaleStats,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct ScaleStats {
    count: usize,
    sum_lambda: f64,
    sum_x: f64,
}

impl LearnerState {
    pub fn new(estimates: BTreeMap<CustomerId, BetaParams>, eta: f64) -> Result<Self> {
        if !(eta > 0.0) || !eta.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "learning rate must be positive, got eta={eta}"
            )));
        }
        Ok(Self {
            estimates,
            eta,
            events_seen: 0,
            feature_scaling: false,
            scale_stats: ScaleStats::default(),
        })
    }

    /// Zero-initialized estimates for the given customers.
    pub fn zeros(customers: &[CustomerId], eta: f64) -> Result<Self> {
        let estimates = customers
            .iter()
            .map(|&id| (id, BetaParams::new(0.0, 0.0)))
            .collect();
        Self::new(estimates, eta)
    }

    /// Warm start from per-customer least-squares fits.
    pub fn from_batch_fits(
        histories: &BTreeMap<CustomerId, CustomerHistory>,
        eta: f64,
    ) -> Result<Self> {
        let mut estimates = BTreeMap::new();
        for (&id, history) in histories {
            estimates.insert(id, batch_ols(history)?);
        }
        Self::new(estimates, eta)
    }

    pub fn with_feature_scaling(mut self, enabled: bool) -> Self {
        self.feature_scaling = enabled;
        self
    }

    /// Folds one event into every estimate for which a curtailment was
    /// recorded. A single customer's update sequence is strictly ordered;
    /// distinct customers are independent.
    pub fn observe_event(&mut self, record: &DREventRecord) -> Result<()> {
        if self.feature_scaling {
            let mean_x_event = if record.curtailments.is_empty() {
                0.0
            } else {
                record.total_curtailment() / record.curtailments.len() as f64
            };
            self.scale_stats.count += 1;
            self.scale_stats.sum_lambda += record.lambda;
            self.scale_stats.sum_x += mean_x_event;
        }
        for (&id, &x) in &record.curtailments {
            let current = self
                .estimates
                .get(&id)
                .copied()
                .unwrap_or(BetaParams::new(0.0, 0.0));
            let next = if self.feature_scaling {
                self.scaled_step(&current, record.lambda, x)?
            } else {
                ogd_step(&current, record.lambda, x, self.eta)?
            };
            self.estimates.insert(id, next);
        }
        self.events_seen += 1;
        Ok(())
    }

    /// Gradient step in mean-normalized coordinates, converted back to
    /// natural units.
    fn scaled_step(&self, beta: &BetaParams, lambda: f64, x: f64) -> Result<BetaParams> {
        let n = self.scale_stats.count.max(1) as f64;
        let lambda_scale = (self.scale_stats.sum_lambda / n).abs().max(1e-9);
        let x_scale = (self.scale_stats.sum_x / n).abs().max(1e-9);
        let scaled = BetaParams::new(beta.beta1 * lambda_scale / x_scale, beta.beta0 / x_scale);
        let stepped = ogd_step(&scaled, lambda / lambda_scale, x / x_scale, self.eta)?;
        Ok(BetaParams::new(
            stepped.beta1 * x_scale / lambda_scale,
            stepped.beta0 * x_scale,
        ))
    }

    /// Component-wise sum of the current estimates, the aggregate behavior
    /// the incentive design runs on.
    pub fn aggregate_estimate(&self) -> BetaParams {
        let mut b1 = 0.0;
        let mut b0 = 0.0;
        for beta in self.estimates.values() {
            b1 += beta.beta1;
            b0 += beta.beta0;
        }
        BetaParams::new(b1, b0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn history(pairs: &[(f64, f64)]) -> CustomerHistory {
        CustomerHistory::new(pairs.to_vec())
    }

    #[test]
    fn loss_zero_on_exact_fit() {
        let h = history(&[(1.0, 5.0), (2.0, 7.0)]);
        assert_eq!(empirical_loss(&h, &BetaParams::new(2.0, 3.0)).unwrap(), 0.0);
    }

    #[test]
    fn loss_direct_substitution() {
        let h = history(&[(1.0, 5.0), (2.0, 7.0)]);
        assert_relative_eq!(
            empirical_loss(&h, &BetaParams::new(0.0, 0.0)).unwrap(),
            18.5
        );
    }

    #[test]
    fn loss_rejects_empty_history() {
        assert!(empirical_loss(&CustomerHistory::default(), &BetaParams::new(1.0, 0.0)).is_err());
    }

    #[test]
    fn ols_two_points_determine_line() {
        let fit = batch_ols(&history(&[(1.0, 5.0), (2.0, 7.0)])).unwrap();
        assert_relative_eq!(fit.beta1, 2.0, max_relative = 1e-12);
        assert_relative_eq!(fit.beta0, 3.0, max_relative = 1e-12);
    }

    #[test]
    fn ols_degenerate_design_falls_back_to_mean() {
        let fit = batch_ols(&history(&[(1.5, 4.0), (1.5, 6.0)])).unwrap();
        assert_eq!(fit.beta1, 0.0);
        assert_relative_eq!(fit.beta0, 5.0);
    }

    #[test]
    fn ols_rejects_empty_history() {
        assert!(batch_ols(&CustomerHistory::default()).is_err());
    }

    #[test]
    fn ols_recovers_generating_line_noise_free() {
        let truth = BetaParams::new(2.0, 3.0);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut h = CustomerHistory::default();
        for _ in 0..20 {
            let lambda = rng.gen_range(1.0..2.0);
            h.push(lambda, truth.response(lambda).unwrap());
        }
        let fit = batch_ols(&h).unwrap();
        assert_relative_eq!(fit.beta1, truth.beta1, max_relative = 1e-9);
        assert_relative_eq!(fit.beta0, truth.beta0, max_relative = 1e-9);
    }

    #[test]
    fn ols_is_local_minimum_of_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let mut h = CustomerHistory::default();
            for _ in 0..12 {
                h.push(rng.gen_range(0.5..3.0), rng.gen_range(0.0..60.0));
            }
            let fit = batch_ols(&h).unwrap();
            let base = empirical_loss(&h, &fit).unwrap();
            for (d1, d0) in [(1e-3, 0.0), (-1e-3, 0.0), (0.0, 1e-3), (0.0, -1e-3)] {
                let nudged = BetaParams::new(fit.beta1 + d1, fit.beta0 + d0);
                assert!(empirical_loss(&h, &nudged).unwrap() >= base);
            }
        }
    }

    #[test]
    fn ogd_direct_substitution() {
        let next = ogd_step(&BetaParams::new(0.0, 0.0), 1.0, 2.0, 0.1).unwrap();
        assert_relative_eq!(next.beta0, 0.2);
        assert_relative_eq!(next.beta1, 0.2);
    }

    #[test]
    fn ogd_zero_residual_is_identity() {
        let beta = BetaParams::new(2.0, 3.0);
        let next = ogd_step(&beta, 1.5, beta.response(1.5).unwrap(), 0.3).unwrap();
        assert_eq!(next, beta);
    }

    #[test]
    fn ogd_converges_to_batch_fit_on_stationary_stream() {
        let truth = BetaParams::new(2.0, 3.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut h = CustomerHistory::default();
        let mut beta = BetaParams::new(0.0, 0.0);
        for _ in 0..10_000 {
            let lambda = rng.gen_range(1.0..2.0);
            let x = truth.response(lambda).unwrap();
            h.push(lambda, x);
            beta = ogd_step(&beta, lambda, x, 0.05).unwrap();
        }
        let fit = batch_ols(&h).unwrap();
        let dist =
            ((beta.beta1 - fit.beta1).powi(2) + (beta.beta0 - fit.beta0).powi(2)).sqrt();
        assert!(dist < 1e-3, "online estimate off the batch fit by {dist}");
    }

    #[test]
    fn learner_state_counts_events_and_warm_starts() {
        let mut histories = BTreeMap::new();
        histories.insert(CustomerId(0), history(&[(1.0, 5.0), (2.0, 7.0)]));
        histories.insert(CustomerId(1), history(&[(1.0, 8.0), (2.0, 8.0)]));
        let mut state = LearnerState::from_batch_fits(&histories, 0.01).unwrap();
        assert_eq!(state.events_seen, 0);
        assert_relative_eq!(state.estimates[&CustomerId(0)].beta1, 2.0, max_relative = 1e-12);
        let agg = state.aggregate_estimate();
        assert_relative_eq!(agg.beta1, 2.0, max_relative = 1e-12);
        assert_relative_eq!(agg.beta0, 11.0, max_relative = 1e-12);

        let mut curtailments = BTreeMap::new();
        curtailments.insert(CustomerId(0), 6.0);
        curtailments.insert(CustomerId(1), 8.0);
        let record = DREventRecord::new(2, 1.5, curtailments).unwrap();
        state.observe_event(&record).unwrap();
        assert_eq!(state.events_seen, 1);
        // Customer 0's record sits on its fitted line: estimate unchanged.
        assert_eq!(state.estimates[&CustomerId(0)], BetaParams::new(2.0, 3.0));
    }

    #[test]
    fn feature_scaled_updates_track_the_same_stream() {
        let truth = BetaParams::new(4.0, 10.0);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut plain = LearnerState::zeros(&[CustomerId(0)], 0.05).unwrap();
        let mut scaled = LearnerState::zeros(&[CustomerId(0)], 0.05)
            .unwrap()
            .with_feature_scaling(true);
        for t in 0..8_000 {
            let lambda = rng.gen_range(1.0..2.0);
            let x = truth.response(lambda).unwrap();
            let mut curtailments = BTreeMap::new();
            curtailments.insert(CustomerId(0), x);
            let record = DREventRecord::new(t, lambda, curtailments).unwrap();
            plain.observe_event(&record).unwrap();
            scaled.observe_event(&record).unwrap();
        }
        for state in [&plain, &scaled] {
            let est = state.estimates[&CustomerId(0)];
            assert_relative_eq!(est.beta1, truth.beta1, max_relative = 2e-2);
            assert_relative_eq!(est.beta0, truth.beta0, max_relative = 2e-2);
        }
    }

    proptest! {
        #[test]
        fn loss_nonnegative_and_zero_iff_exact(
            beta1 in -5.0..5.0f64,
            beta0 in -5.0..5.0f64,
            lambdas in proptest::collection::vec(0.0..4.0f64, 1..12),
            offsets in proptest::collection::vec(-3.0..3.0f64, 1..12),
        ) {
            let beta = BetaParams::new(beta1, beta0);
            let mut h = CustomerHistory::default();
            let mut all_exact = true;
            for (i, &lambda) in lambdas.iter().enumerate() {
                let off = offsets.get(i).copied().unwrap_or(0.0);
                if off != 0.0 {
                    all_exact = false;
                }
                h.push(lambda, beta.beta1 * lambda + beta.beta0 + off);
            }
            let loss = empirical_loss(&h, &beta).unwrap();
            prop_assert!(loss >= 0.0);
            if all_exact {
                prop_assert!(loss == 0.0);
            } else {
                prop_assert!(loss > 0.0);
            }
        }
    }
}
