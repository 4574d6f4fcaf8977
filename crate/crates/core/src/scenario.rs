//! Scenario synthesis and history persistence.
//!
//! A scenario bundles ground-truth customers, a recorded event history, and
//! the aggregator-side economics. Synthesis randomizes an aggregate program
//! into individual customers whose responses stay inside a published
//! curtailment band across the incentive range, then rolls the recorded
//! events forward with seeded disturbances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::incentive::AggregatorParams;
use crate::learner::CustomerHistory;
use crate::model::{round_sig9, BetaParams, CustomerId, CustomerTruth, DREventRecord};

pub const HISTORY_CSV_HEADER: &str = "event_index,lambda_usd_per_kwh,customer_id,curtailment_kw";

/// Knobs for [`synth_scenario`]. The defaults reproduce the desk-scale
/// program used throughout: 50 customers whose curtailments land in
/// 5..50 kW for incentives in 1..2 $/kWh, observed over 20 events.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub n_customers: usize,
    pub n_events: usize,
    /// Incentive draw range for recorded events, $/kWh.
    pub lambda_range: (f64, f64),
    /// Band every noise-free response must stay inside across
    /// `lambda_range`, kW.
    pub response_range: (f64, f64),
    /// Draw range for the price-sensitivity slope, kW per $/kWh.
    pub beta1_range: (f64, f64),
    /// Curtailment capacity, kW.
    pub x_max: f64,
    /// Response disturbance level, kW.
    pub noise_sigma: f64,
    /// Penalty weight of the aggregator objective.
    pub kappa: f64,
    /// Per-unit DR revenue, $/kWh.
    pub gamma: f64,
    /// Committed curtailment, kW. When absent it is resolved to the
    /// aggregate noise-free response at the midpoint incentive.
    pub commitment_kw: Option<f64>,
    /// Relative spread of per-event commitments around the base value.
    pub commitment_jitter: f64,
    /// Online learning rate of the aggregator.
    pub learner_eta: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            n_customers: 50,
            n_events: 20,
            lambda_range: (1.0, 2.0),
            response_range: (5.0, 50.0),
            beta1_range: (2.0, 20.0),
            x_max: 50.0,
            noise_sigma: 0.5,
            kappa: 1.0,
            gamma: 0.5,
            commitment_kw: None,
            commitment_jitter: 0.1,
            learner_eta: 0.01,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_customers == 0 || self.n_events == 0 {
            return Err(Error::InfeasibleConfig(
                "need at least one customer and one event".into(),
            ));
        }
        let (l_lo, l_hi) = self.lambda_range;
        let (r_lo, r_hi) = self.response_range;
        let (b_lo, b_hi) = self.beta1_range;
        if !(l_lo >= 0.0 && l_hi > l_lo) {
            return Err(Error::InfeasibleConfig(format!(
                "incentive range [{l_lo}, {l_hi}] is not an increasing nonnegative interval"
            )));
        }
        if !(r_lo >= 0.0 && r_hi > r_lo && r_hi <= self.x_max) {
            return Err(Error::InfeasibleConfig(format!(
                "response range [{r_lo}, {r_hi}] must be increasing, nonnegative, and within capacity {}",
                self.x_max
            )));
        }
        if !(b_lo > 0.0 && b_hi >= b_lo) {
            return Err(Error::InfeasibleConfig(format!(
                "slope range [{b_lo}, {b_hi}] must be positive and increasing"
            )));
        }
        // An intercept keeping the response inside the band at both ends of
        // the incentive range exists only if the slope cannot out-travel the
        // band width.
        if b_hi * (l_hi - l_lo) > r_hi - r_lo {
            return Err(Error::InfeasibleConfig(format!(
                "slope up to {b_hi} over an incentive span of {} exceeds the response band width {}",
                l_hi - l_lo,
                r_hi - r_lo
            )));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::InfeasibleConfig("noise level must be nonnegative".into()));
        }
        if !(self.commitment_jitter >= 0.0 && self.commitment_jitter < 1.0) {
            return Err(Error::InfeasibleConfig(
                "commitment jitter must lie in [0, 1)".into(),
            ));
        }
        if !(self.learner_eta > 0.0) {
            return Err(Error::InfeasibleConfig("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// A fully materialized experiment instance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scenario {
    pub customers: Vec<CustomerTruth>,
    pub history: Vec<DREventRecord>,
    pub aggregator: AggregatorParams,
    pub learner_eta: f64,
    pub commitment_jitter: f64,
    pub seed: u64,
}

/// Draws a scenario. Deterministic for a fixed `(config, seed)`; every
/// serialized numeric is rounded to nine significant digits at creation so
/// a save/load cycle is exact.
pub fn synth_scenario(config: &ScenarioConfig, seed: u64) -> Result<Scenario> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (l_lo, l_hi) = config.lambda_range;
    let (r_lo, r_hi) = config.response_range;
    let (b_lo, b_hi) = config.beta1_range;

    let mut customers = Vec::with_capacity(config.n_customers);
    for i in 0..config.n_customers {
        let beta1 = rng.gen_range(b_lo..=b_hi);
        // Intercept window keeping the noise-free response inside the band
        // at both ends of the incentive range.
        let int_lo = r_lo - beta1 * l_lo;
        let int_hi = r_hi - beta1 * l_hi;
        debug_assert!(int_lo <= int_hi, "validated by ScenarioConfig::validate");
        let beta0 = rng.gen_range(int_lo..=int_hi);
        customers.push(CustomerTruth::new(
            CustomerId(i as u32),
            BetaParams::new(round_sig9(beta1), round_sig9(beta0)),
            config.x_max,
            config.noise_sigma,
        )?);
    }

    let lambdas: Vec<f64> = (0..config.n_events)
        .map(|_| round_sig9(rng.gen_range(l_lo..=l_hi)))
        .collect();

    let noise = Normal::new(0.0, config.noise_sigma.max(f64::MIN_POSITIVE))
        .expect("validated sigma");
    let mut history = Vec::with_capacity(config.n_events);
    for (t, &lambda) in lambdas.iter().enumerate() {
        let mut curtailments = BTreeMap::new();
        for customer in &customers {
            let base = customer.beta.response(lambda)?;
            let eps = if config.noise_sigma > 0.0 {
                noise.sample(&mut rng)
            } else {
                0.0
            };
            // Recorded curtailments stay inside the published band.
            let x = (base + eps).clamp(r_lo, r_hi.min(customer.x_max));
            curtailments.insert(customer.id, round_sig9(x));
        }
        history.push(DREventRecord::new(t, lambda, curtailments)?);
    }

    let beta1_sum: f64 = customers.iter().map(|c| c.beta.beta1).sum();
    let beta0_sum: f64 = customers.iter().map(|c| c.beta.beta0).sum();
    let lambda_mid = 0.5 * (l_lo + l_hi);
    let commitment = config
        .commitment_kw
        .unwrap_or(beta1_sum * lambda_mid + beta0_sum);
    let aggregator = AggregatorParams::new(
        config.kappa,
        config.gamma,
        round_sig9(commitment),
        config.n_customers,
    )?;

    Ok(Scenario {
        customers,
        history,
        aggregator,
        learner_eta: config.learner_eta,
        commitment_jitter: config.commitment_jitter,
        seed,
    })
}

impl Scenario {
    pub fn customer_ids(&self) -> Vec<CustomerId> {
        self.customers.iter().map(|c| c.id).collect()
    }

    pub fn customer(&self, id: CustomerId) -> Option<&CustomerTruth> {
        self.customers.iter().find(|c| c.id == id)
    }

    /// Splits the recorded events into per-customer incentive/response
    /// series, preserving event order.
    pub fn customer_histories(&self) -> BTreeMap<CustomerId, CustomerHistory> {
        let mut result: BTreeMap<CustomerId, CustomerHistory> = BTreeMap::new();
        for record in &self.history {
            for (&id, &x) in &record.curtailments {
                result.entry(id).or_default().push(record.lambda, x);
            }
        }
        result
    }

    /// Incentive and total curtailment per event, the publicly observable
    /// series.
    pub fn aggregate_history(&self) -> Vec<(f64, f64)> {
        self.history
            .iter()
            .map(|r| (r.lambda, r.total_curtailment()))
            .collect()
    }

    /// Committed curtailments for events after the recorded history,
    /// jittered around the base commitment. Derived deterministically from
    /// the scenario seed, independent of call order.
    pub fn future_commitments(&self, len: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(u64::MAX); // separate stream from synthesis draws
        let base = self.aggregator.commitment_d;
        (0..len)
            .map(|_| {
                let factor = 1.0 + self.commitment_jitter * rng.gen_range(-1.0..=1.0);
                round_sig9(base * factor)
            })
            .collect()
    }

    /// Validates internal consistency: unique ids, strictly increasing
    /// event indices, and no curtailment referencing an unknown customer.
    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        for customer in &self.customers {
            if !ids.insert(customer.id) {
                return Err(Error::InvalidInput(format!(
                    "duplicate customer id {}",
                    customer.id
                )));
            }
        }
        let mut last_index: Option<usize> = None;
        for record in &self.history {
            if let Some(prev) = last_index {
                if record.event_index <= prev {
                    return Err(Error::Ordering(format!(
                        "event index {} follows {}",
                        record.event_index, prev
                    )));
                }
            }
            last_index = Some(record.event_index);
            for id in record.curtailments.keys() {
                if !ids.contains(id) {
                    return Err(Error::Referential(format!(
                        "event {} records customer {} which is not part of the scenario",
                        record.event_index, id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn save_history<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        save_history(&self.history, path)
    }
}

/// Writes the long-format history CSV: one row per (event, customer).
pub fn save_history<P: AsRef<Path>>(history: &[DREventRecord], path: P) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "{HISTORY_CSV_HEADER}")?;
    for record in history {
        for (id, &x) in &record.curtailments {
            writeln!(
                w,
                "{},{},{},{}",
                record.event_index,
                round_sig9(record.lambda),
                id,
                round_sig9(x)
            )?;
        }
    }
    Ok(())
}

/// Reads a history CSV back into event records. When `roster` is given,
/// rows must reference only those customers. Events must appear in strictly
/// increasing index order with contiguous rows per event; the incentive must
/// be consistent within an event.
pub fn load_history<P: AsRef<Path>>(
    path: P,
    roster: Option<&BTreeSet<CustomerId>>,
) -> Result<Vec<DREventRecord>> {
    let file = std::fs::File::open(path)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(std::io::BufReader::new(file));

    {
        let headers = reader.headers()?;
        let expected: Vec<&str> = HISTORY_CSV_HEADER.split(',').collect();
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(Error::Parse {
                line: 1,
                message: format!(
                    "unexpected header '{}', expected '{HISTORY_CSV_HEADER}'",
                    headers.iter().collect::<Vec<_>>().join(",")
                ),
            });
        }
    }

    let mut history: Vec<DREventRecord> = Vec::new();
    let mut current: Option<(usize, f64, BTreeMap<CustomerId, f64>)> = None;

    for record in reader.records() {
        let record = record?;
        let line = record
            .position()
            .map(|p| p.line())
            .unwrap_or_default();
        let parse_field = |idx: usize, name: &str| -> Result<&str> {
            record.get(idx).ok_or_else(|| Error::Parse {
                line,
                message: format!("missing column {name}"),
            })
        };
        let event_index: usize = parse_field(0, "event_index")?
            .trim()
            .parse()
            .map_err(|e| Error::Parse {
                line,
                message: format!("bad event_index: {e}"),
            })?;
        let lambda: f64 = parse_field(1, "lambda_usd_per_kwh")?
            .trim()
            .parse()
            .map_err(|e| Error::Parse {
                line,
                message: format!("bad lambda_usd_per_kwh: {e}"),
            })?;
        let customer_raw: u32 = parse_field(2, "customer_id")?
            .trim()
            .parse()
            .map_err(|e| Error::Parse {
                line,
                message: format!("bad customer_id: {e}"),
            })?;
        let curtailment: f64 = parse_field(3, "curtailment_kw")?
            .trim()
            .parse()
            .map_err(|e| Error::Parse {
                line,
                message: format!("bad curtailment_kw: {e}"),
            })?;
        if lambda < 0.0 {
            return Err(Error::Parse {
                line,
                message: format!("incentive must be nonnegative, got {lambda}"),
            });
        }
        if curtailment < 0.0 {
            return Err(Error::Parse {
                line,
                message: format!("curtailment must be nonnegative, got {curtailment}"),
            });
        }
        let customer = CustomerId(customer_raw);
        if let Some(roster) = roster {
            if !roster.contains(&customer) {
                return Err(Error::Referential(format!(
                    "line {line}: customer {customer} is not in the scenario roster"
                )));
            }
        }

        match &mut current {
            Some((idx, lam, curtailments)) if *idx == event_index => {
                if (*lam - lambda).abs() > 1e-9 {
                    return Err(Error::Parse {
                        line,
                        message: format!(
                            "event {event_index} has conflicting incentives {lam} and {lambda}"
                        ),
                    });
                }
                if curtailments.insert(customer, curtailment).is_some() {
                    return Err(Error::Parse {
                        line,
                        message: format!(
                            "duplicate row for event {event_index}, customer {customer}"
                        ),
                    });
                }
            }
            _ => {
                if let Some((idx, lam, curtailments)) = current.take() {
                    if event_index <= idx {
                        return Err(Error::Ordering(format!(
                            "line {line}: event index {event_index} does not increase past {idx}"
                        )));
                    }
                    history.push(DREventRecord::new(idx, lam, curtailments)?);
                }
                let mut curtailments = BTreeMap::new();
                curtailments.insert(customer, curtailment);
                current = Some((event_index, lambda, curtailments));
            }
        }
    }
    if let Some((idx, lam, curtailments)) = current.take() {
        history.push(DREventRecord::new(idx, lam, curtailments)?);
    }
    if history.is_empty() {
        return Err(Error::InvalidInput("history file holds no events".into()));
    }
    Ok(history)
}
