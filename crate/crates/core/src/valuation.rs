//! Ranking of historical DR events and of DR customers by their
//! contribution to the learned response models.
//!
//! Event values are Shapley values of a coalition game whose payoff is the
//! ratio of the full-history learning loss to the loss of a fit trained on
//! a subset; a permutation positions every event, its marginal payoff is
//! averaged over permutations. Customer values compare each customer's
//! learned line against the aggregate fit on the (per-customer normalized)
//! aggregate series.

use itertools::Itertools;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::learner::{batch_ols, empirical_loss, CustomerHistory, OlsAccumulator};
use crate::model::{BetaParams, CustomerId};

/// Loss floor below which a fit counts as exact; the payoff ratio is then
/// capped instead of dividing by a vanishing denominator.
pub const LOSS_FLOOR: f64 = 1e-12;

/// Payoff assigned when the denominator loss is below [`LOSS_FLOOR`].
pub const PAYOFF_CAP: f64 = 1e6;

/// Number of permutations each deterministic Monte-Carlo work unit draws.
const MC_CHUNK: usize = 128;

/// Hard cap for exact enumeration; factorial growth beyond this is
/// pointless when the Monte-Carlo estimator exists.
pub const EXACT_EVENT_LIMIT: usize = 8;

/// Per-event values for one customer's history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventValueReport {
    /// Value of each event, indexed by its position in the history.
    pub values: Vec<f64>,
    /// Permutations averaged into the values.
    pub permutations_used: usize,
    /// Running estimates sampled while the Monte-Carlo sum grew; empty for
    /// exact enumeration.
    pub convergence_trace: Vec<ConvergencePoint>,
    /// Events whose payoff hit the ratio cap at least once.
    pub capped_events: BTreeSet<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergencePoint {
    pub permutations: usize,
    pub values: Vec<f64>,
}

/// Per-customer values against the aggregate behavior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CustomerValueReport {
    pub values: BTreeMap<CustomerId, f64>,
    /// Customers whose individual loss was below the floor.
    pub capped: BTreeSet<CustomerId>,
}

/// Payoff of a subset fit: full-history loss over the subset-fit loss,
/// capped when the denominator collapses.
fn payoff(full_loss: f64, subset_loss: f64) -> (f64, bool) {
    if subset_loss < LOSS_FLOOR {
        (PAYOFF_CAP, true)
    } else {
        (full_loss / subset_loss, false)
    }
}

/// Accumulates one permutation's marginal payoffs into `sums`.
fn accumulate_permutation(
    perm: &[usize],
    history: &CustomerHistory,
    full_loss: f64,
    sums: &mut [f64],
    capped: &mut BTreeSet<usize>,
) {
    let mut acc = OlsAccumulator::default();
    for (pos, &event) in perm.iter().enumerate() {
        let before = acc.fit();
        let (lambda, x) = history.pairs[event];
        acc.add(lambda, x);
        if pos == 0 {
            // Empty preceding set: the event contributes nothing in this
            // permutation by convention.
            continue;
        }
        let with_fit = acc.fit().expect("nonempty accumulator");
        let without_fit = before.expect("pos > 0 means a preceding fit exists");
        let loss_with = empirical_loss(history, &with_fit).expect("history nonempty");
        let loss_without = empirical_loss(history, &without_fit).expect("history nonempty");
        let (u_with, cap_a) = payoff(full_loss, loss_with);
        let (u_without, cap_b) = payoff(full_loss, loss_without);
        if cap_a || cap_b {
            capped.insert(event);
        }
        sums[event] += u_with - u_without;
    }
}

fn full_fit_loss(history: &CustomerHistory) -> Result<f64> {
    let fit = batch_ols(history)?;
    empirical_loss(history, &fit)
}

/// Monte-Carlo event valuation: averages marginal payoffs over `m` random
/// permutations. Permutations are drawn in fixed-size chunks on independent
/// seeded streams and reduced in chunk order, so the result is identical
/// for a given seed regardless of worker count.
pub fn shapley_events_mc(
    history: &CustomerHistory,
    m: usize,
    seed: u64,
) -> Result<EventValueReport> {
    if m == 0 {
        return Err(Error::InvalidInput(
            "at least one permutation is required".into(),
        ));
    }
    if history.is_empty() {
        return Err(Error::InvalidInput("history is empty".into()));
    }
    let t = history.len();
    let full_loss = full_fit_loss(history)?;

    let n_chunks = m.div_ceil(MC_CHUNK);
    let chunk_results: Vec<(Vec<f64>, BTreeSet<usize>, usize)> = (0..n_chunks)
        .into_par_iter()
        .map(|chunk| {
            let count = MC_CHUNK.min(m - chunk * MC_CHUNK);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(chunk as u64 + 1);
            let mut sums = vec![0.0; t];
            let mut capped = BTreeSet::new();
            let mut perm: Vec<usize> = (0..t).collect();
            for _ in 0..count {
                perm.shuffle(&mut rng);
                accumulate_permutation(&perm, history, full_loss, &mut sums, &mut capped);
            }
            (sums, capped, count)
        })
        .collect();

    let trace_stride = n_chunks.div_ceil(50).max(1);
    let mut sums = vec![0.0; t];
    let mut capped = BTreeSet::new();
    let mut done = 0usize;
    let mut convergence_trace = Vec::new();
    for (i, (chunk_sums, chunk_capped, count)) in chunk_results.into_iter().enumerate() {
        for (s, c) in sums.iter_mut().zip(&chunk_sums) {
            *s += c;
        }
        capped.extend(chunk_capped);
        done += count;
        if i % trace_stride == trace_stride - 1 || i == n_chunks - 1 {
            convergence_trace.push(ConvergencePoint {
                permutations: done,
                values: sums.iter().map(|s| s / done as f64).collect(),
            });
        }
    }

    Ok(EventValueReport {
        values: sums.iter().map(|s| s / m as f64).collect(),
        permutations_used: m,
        convergence_trace,
        capped_events: capped,
    })
}

/// Exact event valuation by enumerating every permutation. Serves as the
/// oracle for the Monte-Carlo estimator; keeps the same empty-preceding-set
/// convention so the two agree in the limit.
pub fn shapley_events_exact(history: &CustomerHistory) -> Result<EventValueReport> {
    if history.is_empty() {
        return Err(Error::InvalidInput("history is empty".into()));
    }
    let t = history.len();
    if t > EXACT_EVENT_LIMIT {
        return Err(Error::SizeLimit(format!(
            "exact enumeration is limited to {EXACT_EVENT_LIMIT} events, got {t}"
        )));
    }
    let full_loss = full_fit_loss(history)?;
    let mut sums = vec![0.0; t];
    let mut capped = BTreeSet::new();
    let mut count = 0usize;
    for perm in (0..t).permutations(t) {
        accumulate_permutation(&perm, history, full_loss, &mut sums, &mut capped);
        count += 1;
    }
    Ok(EventValueReport {
        values: sums.iter().map(|s| s / count as f64).collect(),
        permutations_used: count,
        convergence_trace: Vec::new(),
        capped_events: capped,
    })
}

/// Ranks customers by how well their individual learned line explains the
/// aggregate series. Both losses are evaluated on the aggregate history
/// scaled down by the customer count, which puts individual lines and the
/// aggregate fit on the same axis.
pub fn rank_customers(
    per_customer_betas: &BTreeMap<CustomerId, BetaParams>,
    aggregate_history: &[(f64, f64)],
    aggregate_beta: &BetaParams,
) -> Result<CustomerValueReport> {
    if aggregate_history.is_empty() {
        return Err(Error::InvalidInput("aggregate history is empty".into()));
    }
    if per_customer_betas.is_empty() {
        return Err(Error::InvalidInput("no customer estimates supplied".into()));
    }
    let n = per_customer_betas.len() as f64;
    let normalized = CustomerHistory::new(
        aggregate_history
            .iter()
            .map(|&(lambda, x)| (lambda, x / n))
            .collect(),
    );
    let aggregate_scaled = BetaParams::new(aggregate_beta.beta1 / n, aggregate_beta.beta0 / n);
    let numerator = empirical_loss(&normalized, &aggregate_scaled)?;

    let mut values = BTreeMap::new();
    let mut capped = BTreeSet::new();
    for (&id, beta) in per_customer_betas {
        let denominator = empirical_loss(&normalized, beta)?;
        if denominator < LOSS_FLOOR {
            values.insert(id, PAYOFF_CAP);
            capped.insert(id);
        } else {
            values.insert(id, numerator / denominator);
        }
    }
    Ok(CustomerValueReport { values, capped })
}

/// Refits on the top-valued fraction of events and reports the loss on the
/// full history relative to the full-data fit, for each requested fraction.
pub fn top_k_loss_curve(
    history: &CustomerHistory,
    values: &EventValueReport,
    fractions: &[f64],
) -> Result<Vec<(f64, f64)>> {
    if history.is_empty() {
        return Err(Error::InvalidInput("history is empty".into()));
    }
    if values.values.len() != history.len() {
        return Err(Error::InvalidInput(format!(
            "value report covers {} events but the history has {}",
            values.values.len(),
            history.len()
        )));
    }
    let t = history.len();
    let full_loss = full_fit_loss(history)?;

    // Highest value first; ties broken by position for determinism.
    let mut order: Vec<usize> = (0..t).collect();
    order.sort_by(|&a, &b| {
        values.values[b]
            .partial_cmp(&values.values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });

    let mut curve = Vec::with_capacity(fractions.len());
    for &fraction in fractions {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::InvalidInput(format!(
                "fraction must lie in (0, 1], got {fraction}"
            )));
        }
        let k = (fraction * t as f64).floor() as usize;
        if k == 0 {
            return Err(Error::InvalidInput(format!(
                "fraction {fraction} selects no events out of {t}"
            )));
        }
        let subset = CustomerHistory::new(order[..k].iter().map(|&i| history.pairs[i]).collect());
        let fit = batch_ols(&subset)?;
        let loss = empirical_loss(history, &fit)?;
        let relative = if full_loss < LOSS_FLOOR {
            if loss < LOSS_FLOOR {
                1.0
            } else {
                PAYOFF_CAP
            }
        } else {
            loss / full_loss
        };
        curve.push((fraction, relative));
    }
    Ok(curve)
}
