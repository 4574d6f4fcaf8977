//! The attacker's side: estimate aggregate behavior from public data,
//! optimize poisoned curtailments so the aggregator learns an
//! attacker-chosen aggregate response, and roll the poisoned loop out to
//! measure the monetary impact.
//!
//! The online planner treats the compromised customers' reported
//! curtailments over the horizon as free decision variables inside their
//! capacity boxes, forward-simulates the closed loop (gradient-step
//! learner, incentive design, customer responses), and descends the
//! terminal target deviation plus a delivery-band penalty by projected
//! gradient with central-difference gradients. The offline planner rewrites
//! the stored history and retrains with least squares instead.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::incentive::broadcast_incentive;
use crate::learner::{batch_ols, CustomerHistory, LearnerState, OlsAccumulator};
use crate::model::{clip_to_capacity, BetaParams, CustomerId};
use crate::scenario::Scenario;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackMode {
    /// Poison live events as they happen.
    Online,
    /// Rewrite the stored history before the next retrain.
    Offline,
}

/// What the attacker wants and what it may touch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackSpec {
    pub compromised_ids: BTreeSet<CustomerId>,
    /// Event ordinals under attack, contiguous and ascending. Online
    /// horizons start right after the recorded history; offline horizons
    /// must cover the history exactly.
    pub horizon: Vec<usize>,
    /// Aggregate behavior the learner should be driven to.
    pub target_beta: BetaParams,
    pub mode: AttackMode,
    /// Explicit per-event delivery tolerances, kW. When absent, each event
    /// tolerates `delta_frac` of its delivery reference.
    pub delta_kw: Option<Vec<f64>>,
    /// Fraction of the per-event delivery reference tolerated as aggregate
    /// error.
    pub delta_frac: f64,
}

impl AttackSpec {
    pub fn online(
        compromised_ids: BTreeSet<CustomerId>,
        horizon: std::ops::Range<usize>,
        target_beta: BetaParams,
    ) -> Self {
        Self {
            compromised_ids,
            horizon: horizon.collect(),
            target_beta,
            mode: AttackMode::Online,
            delta_kw: None,
            delta_frac: 0.05,
        }
    }

    pub fn offline(
        compromised_ids: BTreeSet<CustomerId>,
        history_len: usize,
        target_beta: BetaParams,
    ) -> Self {
        Self {
            compromised_ids,
            horizon: (0..history_len).collect(),
            target_beta,
            mode: AttackMode::Offline,
            delta_kw: None,
            delta_frac: 0.05,
        }
    }

    pub fn with_delta_frac(mut self, frac: f64) -> Self {
        self.delta_frac = frac;
        self
    }

    fn validate(&self, scenario: &Scenario) -> Result<()> {
        if self.horizon.is_empty() {
            return Err(Error::InvalidInput("attack horizon is empty".into()));
        }
        for pair in self.horizon.windows(2) {
            if pair[1] != pair[0] + 1 {
                return Err(Error::Ordering(
                    "attack horizon must be contiguous ascending ordinals".into(),
                ));
            }
        }
        let roster: BTreeSet<CustomerId> = scenario.customer_ids().into_iter().collect();
        for id in &self.compromised_ids {
            if !roster.contains(id) {
                return Err(Error::Referential(format!(
                    "compromised customer {id} is not part of the scenario"
                )));
            }
        }
        if !(self.delta_frac >= 0.0) {
            return Err(Error::InvalidParameter(
                "delivery tolerance fraction must be nonnegative".into(),
            ));
        }
        if let Some(deltas) = &self.delta_kw {
            if deltas.len() != self.horizon.len() {
                return Err(Error::InvalidInput(format!(
                    "{} explicit tolerances for a {}-event horizon",
                    deltas.len(),
                    self.horizon.len()
                )));
            }
            if deltas.iter().any(|d| *d < 0.0) {
                return Err(Error::InvalidParameter(
                    "delivery tolerances must be nonnegative".into(),
                ));
            }
        }
        match self.mode {
            AttackMode::Online => {
                let next = scenario
                    .history
                    .last()
                    .map(|r| r.event_index + 1)
                    .unwrap_or(0);
                if self.horizon[0] != next {
                    return Err(Error::InvalidInput(format!(
                        "online horizon must start at the next event ordinal {next}, got {}",
                        self.horizon[0]
                    )));
                }
            }
            AttackMode::Offline => {
                let recorded: Vec<usize> =
                    scenario.history.iter().map(|r| r.event_index).collect();
                if self.horizon != recorded {
                    return Err(Error::InvalidInput(
                        "offline horizon must cover the recorded history exactly".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    fn resolved_deltas(&self, references: &[f64]) -> Vec<f64> {
        match &self.delta_kw {
            Some(explicit) => explicit.clone(),
            None => references.iter().map(|r| self.delta_frac * r.abs()).collect(),
        }
    }
}

/// Solver knobs for [`plan_attack`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverOptions {
    pub max_iters: usize,
    /// Stop once an accepted step improves the objective by less than this.
    pub tol_obj_change: f64,
    /// Central-difference step as a fraction of each customer's capacity.
    pub fd_step_frac: f64,
    /// Weight of the squared delivery-band violation.
    pub penalty_mu: f64,
    /// Fraction of each delivery tolerance held back from the planner. The
    /// soft penalty lets solutions ride the band edge and the simulated
    /// rollout adds disturbances; the margin keeps realized deliveries
    /// inside the full band.
    pub delivery_margin_frac: f64,
    /// Also average the target deviation along the horizon instead of
    /// scoring only its end.
    pub path_average: bool,
    /// Residual below this fraction of the target norm counts as converged.
    pub convergence_tol_frac: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iters: 5000,
            tol_obj_change: 1e-8,
            fd_step_frac: 1e-4,
            penalty_mu: 10.0,
            delivery_margin_frac: 0.2,
            path_average: false,
            convergence_tol_frac: 0.01,
        }
    }
}

/// Optimized poisoning schedule.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackPlan {
    pub spec: AttackSpec,
    /// Optimized reported curtailments, kW, keyed by (event ordinal,
    /// customer).
    pub fake_curtailments: BTreeMap<(usize, CustomerId), f64>,
    /// Penalized objective at every accepted solver iterate; nonincreasing.
    pub objective_trajectory: Vec<f64>,
    pub converged: bool,
    /// Final distance of the learned aggregate from the target.
    pub residual: f64,
    /// Set when no box-feasible reports can hold every event inside its
    /// delivery band along the baseline trajectory.
    pub delivery_infeasible: bool,
    pub iterations: usize,
}

/// One event of a closed-loop rollout, attacked and benign side by side.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackEventRecord {
    pub event_index: usize,
    pub lambda_benign: f64,
    pub lambda_attacked: f64,
    pub total_benign: f64,
    pub total_attacked: f64,
    /// Delivery reference for the band check (committed curtailment online,
    /// original recorded total offline).
    pub commitment: f64,
    pub delta_kw: f64,
    pub aggregate_estimate_benign: BetaParams,
    pub aggregate_estimate_attacked: BetaParams,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackTrace {
    pub events: Vec<AttackEventRecord>,
    /// Payout difference, attacked minus benign, $.
    pub monetary_delta: f64,
}

/// Payout accounting over a trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MonetaryReport {
    pub payout_benign: f64,
    pub payout_attacked: f64,
    pub delta_total: f64,
    pub per_event_delta: Vec<f64>,
}

/// Fits the aggregate response line from the publicly observable
/// (incentive, total curtailment) series. Degenerate designs fall back the
/// same way the per-customer fit does.
pub fn estimate_aggregate_behavior(aggregate_history: &[(f64, f64)]) -> Result<BetaParams> {
    batch_ols(&CustomerHistory::new(aggregate_history.to_vec()))
}

struct OnlineEnv<'a> {
    scenario: &'a Scenario,
    /// Customer indices, compromised in id order, benign in id order.
    compromised: Vec<usize>,
    benign: Vec<usize>,
    horizon: &'a [usize],
    commitments: Vec<f64>,
    deltas: Vec<f64>,
    eta: f64,
    init_b1: Vec<f64>,
    init_b0: Vec<f64>,
    target: BetaParams,
    penalty_mu: f64,
    path_average: bool,
    /// Per-(event, customer) disturbances; absent for planning rollouts.
    noise: Option<Vec<Vec<f64>>>,
}

struct RolloutOutput {
    objective: f64,
    residual: f64,
    /// (lambda, total delivered, aggregate estimate) per event; populated
    /// when recording.
    path: Option<Vec<(f64, f64, BetaParams)>>,
}

impl<'a> OnlineEnv<'a> {
    /// Forward-simulates the closed loop. `reports` holds the compromised
    /// customers' reported curtailments, event-major; when `benign_override`
    /// is set the compromised customers behave benignly instead (the
    /// counterfactual rollout).
    fn rollout(&self, reports: &[f64], benign_override: bool, record: bool) -> RolloutOutput {
        let t = self.horizon.len();
        let k = self.compromised.len();
        let mut b1 = self.init_b1.clone();
        let mut b0 = self.init_b0.clone();
        let mut penalty = 0.0;
        let mut path_dev = 0.0;
        let mut path = record.then(|| Vec::with_capacity(t));

        for pos in 0..t {
            let b1_sum: f64 = b1.iter().sum();
            let b0_sum: f64 = b0.iter().sum();
            let lambda = broadcast_incentive(
                b1_sum,
                b0_sum,
                &self.scenario.aggregator,
                self.commitments[pos],
            );

            let mut total = 0.0;
            // Benign customers respond according to their true behavior.
            for &i in &self.benign {
                let c = &self.scenario.customers[i];
                let mut x = c.beta.beta1 * lambda + c.beta.beta0;
                if let Some(noise) = &self.noise {
                    x += noise[pos][i];
                }
                let x = clip_to_capacity(x, c.x_max);
                total += x;
                let residual = b0[i] + b1[i] * lambda - x;
                b0[i] -= self.eta * residual;
                b1[i] -= self.eta * residual * lambda;
            }
            // Compromised customers report what the plan dictates.
            for (slot, &i) in self.compromised.iter().enumerate() {
                let c = &self.scenario.customers[i];
                let x = if benign_override {
                    let mut x = c.beta.beta1 * lambda + c.beta.beta0;
                    if let Some(noise) = &self.noise {
                        x += noise[pos][i];
                    }
                    clip_to_capacity(x, c.x_max)
                } else {
                    reports[pos * k + slot]
                };
                total += x;
                let residual = b0[i] + b1[i] * lambda - x;
                b0[i] -= self.eta * residual;
                b1[i] -= self.eta * residual * lambda;
            }

            let violation = ((self.commitments[pos] - total).abs() - self.deltas[pos]).max(0.0);
            penalty += violation * violation;
            if self.path_average {
                let d1: f64 = b1.iter().sum::<f64>() - self.target.beta1;
                let d0: f64 = b0.iter().sum::<f64>() - self.target.beta0;
                path_dev += (d1 * d1 + d0 * d0).sqrt();
            }
            if let Some(path) = &mut path {
                path.push((
                    lambda,
                    total,
                    BetaParams::new(b1.iter().sum(), b0.iter().sum()),
                ));
            }
        }

        let d1 = b1.iter().sum::<f64>() - self.target.beta1;
        let d0 = b0.iter().sum::<f64>() - self.target.beta0;
        let residual = (d1 * d1 + d0 * d0).sqrt();
        let mut objective = residual + self.penalty_mu * penalty;
        if self.path_average {
            objective += path_dev / t as f64;
        }
        RolloutOutput {
            objective,
            residual,
            path,
        }
    }
}

/// Shared projected-gradient descent: minimizes `objective` over `x` inside
/// the per-coordinate boxes `[0, upper[i]]`, recording accepted objective
/// values. Returns the trajectory and iteration count.
fn projected_gradient_descent<F>(
    x: &mut [f64],
    upper: &[f64],
    fd_steps: &[f64],
    objective: F,
    options: &SolverOptions,
) -> (Vec<f64>, usize)
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let project = |v: &mut [f64]| {
        for (xi, &hi) in v.iter_mut().zip(upper) {
            *xi = xi.clamp(0.0, hi);
        }
    };
    project(x);
    let mut f = objective(x);
    let mut trajectory = vec![f];
    let mut step = f64::NAN; // scaled from the first gradient
    let mut iterations = 0usize;

    for _ in 0..options.max_iters {
        iterations += 1;
        let base: Vec<f64> = x.to_vec();
        let grad: Vec<f64> = (0..base.len())
            .into_par_iter()
            .map(|j| {
                let h = fd_steps[j];
                let mut probe = base.clone();
                probe[j] = base[j] + h;
                let fp = objective(&probe);
                probe[j] = base[j] - h;
                let fm = objective(&probe);
                (fp - fm) / (2.0 * h)
            })
            .collect();
        let gmax = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if gmax == 0.0 {
            break;
        }
        if step.is_nan() {
            // First trial moves the largest component by 5% of its box.
            let scale = upper.iter().cloned().fold(0.0f64, f64::max).max(1.0);
            step = 0.05 * scale / gmax;
        }

        let try_step = |s: f64| -> f64 {
            let mut trial = base.clone();
            for ((ti, &gi), &hi) in trial.iter_mut().zip(&grad).zip(upper) {
                *ti = (*ti - s * gi).clamp(0.0, hi);
            }
            objective(&trial)
        };

        // Approximate line minimization along the projected direction:
        // shrink until the step improves, then keep doubling while it keeps
        // improving, and take the best step seen.
        let mut s = step;
        let mut fs = try_step(s);
        let mut shrinks = 0;
        while fs >= f {
            s *= 0.5;
            shrinks += 1;
            if s * gmax < 1e-14 || shrinks > 60 {
                return (trajectory, iterations);
            }
            fs = try_step(s);
        }
        let (mut best_s, mut best_f) = (s, fs);
        for _ in 0..40 {
            let s2 = best_s * 2.0;
            let f2 = try_step(s2);
            if f2 < best_f {
                best_s = s2;
                best_f = f2;
            } else {
                break;
            }
        }

        for ((xi, &gi), &hi) in x.iter_mut().zip(&grad).zip(upper) {
            *xi = (*xi - best_s * gi).clamp(0.0, hi);
        }
        let improvement = f - best_f;
        f = best_f;
        trajectory.push(f);
        step = best_s;
        if improvement < options.tol_obj_change {
            break;
        }
    }
    (trajectory, iterations)
}

/// Optimizes the poisoning schedule for `spec` starting from the learner
/// state the aggregator holds at the beginning of the horizon.
pub fn plan_attack(
    scenario: &Scenario,
    spec: &AttackSpec,
    learner_init: &LearnerState,
    options: &SolverOptions,
) -> Result<AttackPlan> {
    scenario.validate()?;
    spec.validate(scenario)?;
    let roster = scenario.customer_ids();
    for id in &roster {
        if !learner_init.estimates.contains_key(id) {
            return Err(Error::InvalidInput(format!(
                "learner state is missing an estimate for customer {id}"
            )));
        }
    }
    match spec.mode {
        AttackMode::Online => plan_online(scenario, spec, learner_init, options),
        AttackMode::Offline => plan_offline(scenario, spec, options),
    }
}

fn partition_indices(scenario: &Scenario, spec: &AttackSpec) -> (Vec<usize>, Vec<usize>) {
    let mut compromised = Vec::new();
    let mut benign = Vec::new();
    for (i, c) in scenario.customers.iter().enumerate() {
        if spec.compromised_ids.contains(&c.id) {
            compromised.push(i);
        } else {
            benign.push(i);
        }
    }
    (compromised, benign)
}

fn plan_online(
    scenario: &Scenario,
    spec: &AttackSpec,
    learner_init: &LearnerState,
    options: &SolverOptions,
) -> Result<AttackPlan> {
    let (compromised, benign) = partition_indices(scenario, spec);
    let t = spec.horizon.len();
    let k = compromised.len();
    let commitments = scenario.future_commitments(t);
    let deltas: Vec<f64> = spec
        .resolved_deltas(&commitments)
        .iter()
        .map(|d| d * (1.0 - options.delivery_margin_frac))
        .collect();

    let init_b1: Vec<f64> = scenario
        .customers
        .iter()
        .map(|c| learner_init.estimates[&c.id].beta1)
        .collect();
    let init_b0: Vec<f64> = scenario
        .customers
        .iter()
        .map(|c| learner_init.estimates[&c.id].beta0)
        .collect();

    let env = OnlineEnv {
        scenario,
        compromised: compromised.clone(),
        benign,
        horizon: &spec.horizon,
        commitments: commitments.clone(),
        deltas: deltas.clone(),
        eta: learner_init.eta,
        init_b1,
        init_b0,
        target: spec.target_beta,
        penalty_mu: options.penalty_mu,
        path_average: options.path_average,
        noise: None,
    };

    let target_norm = (spec.target_beta.beta1.powi(2) + spec.target_beta.beta0.powi(2))
        .sqrt()
        .max(f64::MIN_POSITIVE);

    // Baseline: everyone behaves benignly. Seeds the decision variables and
    // anchors the feasibility check.
    let baseline = env.rollout(&[], true, true);
    let baseline_path = baseline.path.as_ref().expect("recorded");

    if k == 0 {
        // No attack surface: the plan is the benign trajectory.
        return Ok(AttackPlan {
            spec: spec.clone(),
            fake_curtailments: BTreeMap::new(),
            objective_trajectory: vec![baseline.objective],
            converged: baseline.residual <= options.convergence_tol_frac * target_norm,
            residual: baseline.residual,
            delivery_infeasible: false,
            iterations: 0,
        });
    }

    // Box-feasible delivery range along the baseline trajectory: benign
    // share fixed, compromised reports anywhere in their boxes.
    let capacity: f64 = compromised
        .iter()
        .map(|&i| scenario.customers[i].x_max)
        .sum();
    let mut x0 = vec![0.0; t * k];
    let mut delivery_infeasible = false;
    for pos in 0..t {
        let (lambda, _, _) = baseline_path[pos];
        let mut benign_share = 0.0;
        for &i in &env.benign {
            let c = &scenario.customers[i];
            benign_share += clip_to_capacity(c.beta.beta1 * lambda + c.beta.beta0, c.x_max);
        }
        let lo = benign_share;
        let hi = benign_share + capacity;
        let band_lo = commitments[pos] - deltas[pos];
        let band_hi = commitments[pos] + deltas[pos];
        if hi < band_lo || lo > band_hi {
            delivery_infeasible = true;
        }
        for (slot, &i) in compromised.iter().enumerate() {
            let c = &scenario.customers[i];
            x0[pos * k + slot] = clip_to_capacity(c.beta.beta1 * lambda + c.beta.beta0, c.x_max);
        }
    }

    if delivery_infeasible {
        let at_baseline = env.rollout(&x0, false, false);
        return Ok(AttackPlan {
            spec: spec.clone(),
            fake_curtailments: pack_reports(&spec.horizon, scenario, &compromised, &x0),
            objective_trajectory: vec![at_baseline.objective],
            converged: false,
            residual: at_baseline.residual,
            delivery_infeasible: true,
            iterations: 0,
        });
    }

    let upper: Vec<f64> = (0..t * k)
        .map(|j| scenario.customers[compromised[j % k]].x_max)
        .collect();
    let fd_steps: Vec<f64> = upper.iter().map(|&u| options.fd_step_frac * u).collect();
    let objective = |x: &[f64]| env.rollout(x, false, false).objective;
    let (trajectory, iterations) =
        projected_gradient_descent(&mut x0, &upper, &fd_steps, objective, options);
    debug_assert!(
        trajectory.windows(2).all(|w| w[1] <= w[0]),
        "accepted objective values must not increase"
    );

    let final_out = env.rollout(&x0, false, false);
    Ok(AttackPlan {
        spec: spec.clone(),
        fake_curtailments: pack_reports(&spec.horizon, scenario, &compromised, &x0),
        objective_trajectory: trajectory,
        converged: final_out.residual <= options.convergence_tol_frac * target_norm,
        residual: final_out.residual,
        delivery_infeasible: false,
        iterations,
    })
}

fn pack_reports(
    horizon: &[usize],
    scenario: &Scenario,
    compromised: &[usize],
    x: &[f64],
) -> BTreeMap<(usize, CustomerId), f64> {
    let k = compromised.len();
    let mut map = BTreeMap::new();
    for (pos, &ordinal) in horizon.iter().enumerate() {
        for (slot, &i) in compromised.iter().enumerate() {
            map.insert((ordinal, scenario.customers[i].id), x[pos * k + slot]);
        }
    }
    map
}

fn plan_offline(
    scenario: &Scenario,
    spec: &AttackSpec,
    options: &SolverOptions,
) -> Result<AttackPlan> {
    let (compromised, benign) = partition_indices(scenario, spec);
    let t = scenario.history.len();
    let k = compromised.len();

    // Every compromised customer must have a record to rewrite in every
    // event.
    for &i in &compromised {
        let id = scenario.customers[i].id;
        for record in &scenario.history {
            if !record.curtailments.contains_key(&id) {
                return Err(Error::InvalidInput(format!(
                    "customer {id} has no record in event {} to rewrite",
                    record.event_index
                )));
            }
        }
    }

    let lambdas: Vec<f64> = scenario.history.iter().map(|r| r.lambda).collect();
    let originals: Vec<f64> = scenario.history.iter().map(|r| r.total_curtailment()).collect();
    let deltas: Vec<f64> = spec
        .resolved_deltas(&originals)
        .iter()
        .map(|d| d * (1.0 - options.delivery_margin_frac))
        .collect();

    // Benign fits never change under an offline rewrite.
    let histories = scenario.customer_histories();
    let mut benign_fit = BetaParams::new(0.0, 0.0);
    for &i in &benign {
        let fit = batch_ols(&histories[&scenario.customers[i].id])?;
        benign_fit.beta1 += fit.beta1;
        benign_fit.beta0 += fit.beta0;
    }
    // Totals excluding the compromised contributions, per event.
    let fixed_totals: Vec<f64> = scenario
        .history
        .iter()
        .map(|r| {
            r.curtailments
                .iter()
                .filter(|(id, _)| !spec.compromised_ids.contains(id))
                .map(|(_, &x)| x)
                .sum()
        })
        .collect();

    let target = spec.target_beta;
    let mu = options.penalty_mu;
    let objective = |x: &[f64]| -> f64 {
        let mut agg = benign_fit;
        for slot in 0..k {
            let mut acc = OlsAccumulator::default();
            for (pos, &lambda) in lambdas.iter().enumerate() {
                acc.add(lambda, x[pos * k + slot]);
            }
            let fit = acc.fit().expect("history nonempty");
            agg.beta1 += fit.beta1;
            agg.beta0 += fit.beta0;
        }
        let d1 = agg.beta1 - target.beta1;
        let d0 = agg.beta0 - target.beta0;
        let mut objective = (d1 * d1 + d0 * d0).sqrt();
        for pos in 0..t {
            let rewritten: f64 = (0..k).map(|slot| x[pos * k + slot]).sum();
            let total = fixed_totals[pos] + rewritten;
            let violation = ((originals[pos] - total).abs() - deltas[pos]).max(0.0);
            objective += mu * violation * violation;
        }
        objective
    };

    let target_norm = (target.beta1.powi(2) + target.beta0.powi(2))
        .sqrt()
        .max(f64::MIN_POSITIVE);

    if k == 0 {
        let residual = objective(&[]);
        return Ok(AttackPlan {
            spec: spec.clone(),
            fake_curtailments: BTreeMap::new(),
            objective_trajectory: vec![residual],
            converged: residual <= options.convergence_tol_frac * target_norm,
            residual,
            delivery_infeasible: false,
            iterations: 0,
        });
    }

    // Start from the genuine records.
    let mut x0 = vec![0.0; t * k];
    for (pos, record) in scenario.history.iter().enumerate() {
        for (slot, &i) in compromised.iter().enumerate() {
            x0[pos * k + slot] = record.curtailments[&scenario.customers[i].id];
        }
    }
    // Feasibility: rewritten totals can range over the compromised boxes.
    let capacity: f64 = compromised
        .iter()
        .map(|&i| scenario.customers[i].x_max)
        .sum();
    let mut delivery_infeasible = false;
    for pos in 0..t {
        let lo = fixed_totals[pos];
        let hi = fixed_totals[pos] + capacity;
        if hi < originals[pos] - deltas[pos] || lo > originals[pos] + deltas[pos] {
            delivery_infeasible = true;
        }
    }
    if delivery_infeasible {
        let f0 = objective(&x0);
        return Ok(AttackPlan {
            spec: spec.clone(),
            fake_curtailments: pack_reports(&spec.horizon, scenario, &compromised, &x0),
            objective_trajectory: vec![f0],
            converged: false,
            residual: f0,
            delivery_infeasible: true,
            iterations: 0,
        });
    }

    let upper: Vec<f64> = (0..t * k)
        .map(|j| scenario.customers[compromised[j % k]].x_max)
        .collect();
    let fd_steps: Vec<f64> = upper.iter().map(|&u| options.fd_step_frac * u).collect();
    let (trajectory, iterations) =
        projected_gradient_descent(&mut x0, &upper, &fd_steps, &objective, options);

    // Residual without the penalty term.
    let mut agg = benign_fit;
    for slot in 0..k {
        let mut acc = OlsAccumulator::default();
        for (pos, &lambda) in lambdas.iter().enumerate() {
            acc.add(lambda, x0[pos * k + slot]);
        }
        let fit = acc.fit().expect("history nonempty");
        agg.beta1 += fit.beta1;
        agg.beta0 += fit.beta0;
    }
    let residual = ((agg.beta1 - target.beta1).powi(2) + (agg.beta0 - target.beta0).powi(2)).sqrt();

    Ok(AttackPlan {
        spec: spec.clone(),
        fake_curtailments: pack_reports(&spec.horizon, scenario, &compromised, &x0),
        objective_trajectory: trajectory,
        converged: residual <= options.convergence_tol_frac * target_norm,
        residual,
        delivery_infeasible: false,
        iterations,
    })
}

/// Rolls the plan out against the scenario with seeded disturbances and
/// records the benign counterfactual under the same draws.
pub fn simulate_attack(
    plan: &AttackPlan,
    scenario: &Scenario,
    learner_init: &LearnerState,
    seed: u64,
) -> Result<AttackTrace> {
    scenario.validate()?;
    plan.spec.validate(scenario)?;
    match plan.spec.mode {
        AttackMode::Online => simulate_online(plan, scenario, learner_init, seed),
        AttackMode::Offline => simulate_offline(plan, scenario),
    }
}

fn simulate_online(
    plan: &AttackPlan,
    scenario: &Scenario,
    learner_init: &LearnerState,
    seed: u64,
) -> Result<AttackTrace> {
    let spec = &plan.spec;
    let (compromised, benign) = partition_indices(scenario, spec);
    let t = spec.horizon.len();
    let k = compromised.len();

    let mut reports = vec![0.0; t * k];
    for (pos, &ordinal) in spec.horizon.iter().enumerate() {
        for (slot, &i) in compromised.iter().enumerate() {
            let id = scenario.customers[i].id;
            let value = plan.fake_curtailments.get(&(ordinal, id)).ok_or_else(|| {
                Error::InvalidInput(format!(
                    "plan does not cover event {ordinal} for customer {id}"
                ))
            })?;
            reports[pos * k + slot] = *value;
        }
    }

    // One disturbance per (event, customer), shared by the attacked and the
    // counterfactual rollouts so they differ only through the attack.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<Vec<f64>> = (0..t)
        .map(|_| {
            scenario
                .customers
                .iter()
                .map(|c| {
                    if c.noise_sigma > 0.0 {
                        Normal::new(0.0, c.noise_sigma)
                            .expect("validated sigma")
                            .sample(&mut rng)
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();

    let commitments = scenario.future_commitments(t);
    let deltas = spec.resolved_deltas(&commitments);
    let init_b1: Vec<f64> = scenario
        .customers
        .iter()
        .map(|c| learner_init.estimates[&c.id].beta1)
        .collect();
    let init_b0: Vec<f64> = scenario
        .customers
        .iter()
        .map(|c| learner_init.estimates[&c.id].beta0)
        .collect();
    let env = OnlineEnv {
        scenario,
        compromised,
        benign,
        horizon: &spec.horizon,
        commitments: commitments.clone(),
        deltas: deltas.clone(),
        eta: learner_init.eta,
        init_b1,
        init_b0,
        target: spec.target_beta,
        penalty_mu: 0.0,
        path_average: false,
        noise: Some(noise),
    };

    let attacked = env.rollout(&reports, false, true);
    let benign_run = env.rollout(&[], true, true);
    let attacked_path = attacked.path.expect("recorded");
    let benign_path = benign_run.path.expect("recorded");

    let mut events = Vec::with_capacity(t);
    let mut monetary_delta = 0.0;
    for pos in 0..t {
        let (lambda_a, total_a, est_a) = attacked_path[pos];
        let (lambda_b, total_b, est_b) = benign_path[pos];
        monetary_delta += lambda_a * total_a - lambda_b * total_b;
        events.push(AttackEventRecord {
            event_index: spec.horizon[pos],
            lambda_benign: lambda_b,
            lambda_attacked: lambda_a,
            total_benign: total_b,
            total_attacked: total_a,
            commitment: commitments[pos],
            delta_kw: deltas[pos],
            aggregate_estimate_benign: est_b,
            aggregate_estimate_attacked: est_a,
        });
    }
    Ok(AttackTrace {
        events,
        monetary_delta,
    })
}

fn simulate_offline(plan: &AttackPlan, scenario: &Scenario) -> Result<AttackTrace> {
    let spec = &plan.spec;
    let t = scenario.history.len();
    let originals: Vec<f64> = scenario.history.iter().map(|r| r.total_curtailment()).collect();
    let deltas = spec.resolved_deltas(&originals);

    // Running prefix fits per customer, original and rewritten.
    let ids = scenario.customer_ids();
    let mut acc_orig: BTreeMap<CustomerId, OlsAccumulator> = ids
        .iter()
        .map(|&id| (id, OlsAccumulator::default()))
        .collect();
    let mut acc_attack = acc_orig.clone();

    let mut events = Vec::with_capacity(t);
    let mut monetary_delta = 0.0;
    for (pos, record) in scenario.history.iter().enumerate() {
        let lambda = record.lambda;
        let mut total_attacked = 0.0;
        for (&id, &x) in &record.curtailments {
            let rewritten = if spec.compromised_ids.contains(&id) {
                plan.fake_curtailments
                    .get(&(record.event_index, id))
                    .copied()
                    .ok_or_else(|| {
                        Error::InvalidInput(format!(
                            "plan does not cover event {} for customer {id}",
                            record.event_index
                        ))
                    })?
            } else {
                x
            };
            total_attacked += rewritten;
            acc_orig.get_mut(&id).expect("roster").add(lambda, x);
            acc_attack.get_mut(&id).expect("roster").add(lambda, rewritten);
        }
        let sum_fits = |accs: &BTreeMap<CustomerId, OlsAccumulator>| {
            let mut agg = BetaParams::new(0.0, 0.0);
            for acc in accs.values() {
                if let Some(fit) = acc.fit() {
                    agg.beta1 += fit.beta1;
                    agg.beta0 += fit.beta0;
                }
            }
            agg
        };
        let total_benign = originals[pos];
        monetary_delta += lambda * (total_attacked - total_benign);
        events.push(AttackEventRecord {
            event_index: record.event_index,
            lambda_benign: lambda,
            lambda_attacked: lambda,
            total_benign,
            total_attacked,
            commitment: originals[pos],
            delta_kw: deltas[pos],
            aggregate_estimate_benign: sum_fits(&acc_orig),
            aggregate_estimate_attacked: sum_fits(&acc_attack),
        });
    }
    Ok(AttackTrace {
        events,
        monetary_delta,
    })
}

/// Expands a trace into payout totals and per-event deltas.
pub fn monetary_impact(trace: &AttackTrace) -> MonetaryReport {
    let mut payout_benign = 0.0;
    let mut payout_attacked = 0.0;
    let mut per_event_delta = Vec::with_capacity(trace.events.len());
    for event in &trace.events {
        let benign = event.lambda_benign * event.total_benign;
        let attacked = event.lambda_attacked * event.total_attacked;
        payout_benign += benign;
        payout_attacked += attacked;
        per_event_delta.push(attacked - benign);
    }
    MonetaryReport {
        payout_benign,
        payout_attacked,
        delta_total: payout_attacked - payout_benign,
        per_event_delta,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learner::LearnerState;
    use crate::scenario::{synth_scenario, ScenarioConfig};
    use approx::assert_relative_eq;

    fn noise_free_scenario(n_customers: usize, n_events: usize, seed: u64) -> Scenario {
        // Low revenue rate keeps the benign delivery inside the 5% band and
        // a responsive learner with jittered commitments gives the incentive
        // enough spread to steer slope and intercept separately.
        synth_scenario(
            &ScenarioConfig {
                n_customers,
                n_events,
                noise_sigma: 0.0,
                gamma: 0.05,
                learner_eta: 0.08,
                commitment_jitter: 0.15,
                ..ScenarioConfig::default()
            },
            seed,
        )
        .unwrap()
    }

    fn warm_learner(scenario: &Scenario) -> LearnerState {
        LearnerState::from_batch_fits(&scenario.customer_histories(), scenario.learner_eta)
            .unwrap()
    }

    #[test]
    fn aggregate_estimate_is_sum_of_linear_parts() {
        let a = BetaParams::new(1.0, 2.0);
        let b = BetaParams::new(2.0, 1.0);
        let series: Vec<(f64, f64)> = [1.0, 1.4, 1.8]
            .iter()
            .map(|&l| {
                (
                    l,
                    a.response(l).unwrap() + b.response(l).unwrap(),
                )
            })
            .collect();
        let fit = estimate_aggregate_behavior(&series).unwrap();
        assert_relative_eq!(fit.beta1, 3.0, max_relative = 1e-9);
        assert_relative_eq!(fit.beta0, 3.0, max_relative = 1e-9);
    }

    #[test]
    fn aggregate_estimate_single_customer_equals_batch_fit() {
        let scenario = noise_free_scenario(1, 6, 3);
        let series = scenario.aggregate_history();
        let agg = estimate_aggregate_behavior(&series).unwrap();
        let per = batch_ols(&scenario.customer_histories()[&CustomerId(0)]).unwrap();
        assert_eq!(agg, per);
    }

    #[test]
    fn aggregate_estimate_tracks_truth_within_two_percent() {
        let scenario = synth_scenario(&ScenarioConfig::default(), 42).unwrap();
        let fit = estimate_aggregate_behavior(&scenario.aggregate_history()).unwrap();
        let true_b1: f64 = scenario.customers.iter().map(|c| c.beta.beta1).sum();
        let true_b0: f64 = scenario.customers.iter().map(|c| c.beta.beta0).sum();
        assert_relative_eq!(fit.beta1, true_b1, max_relative = 0.02);
        assert_relative_eq!(fit.beta0, true_b0, max_relative = 0.02);
    }

    #[test]
    fn fixed_point_attack_keeps_benign_behavior() {
        // Noise-free scenario with a warm learner: estimates equal the
        // truth, the benign loop is stationary, and targeting the current
        // aggregate needs no deviation at all.
        let scenario = noise_free_scenario(6, 8, 9);
        let learner = warm_learner(&scenario);
        let target = learner.aggregate_estimate();
        let compromised: BTreeSet<CustomerId> =
            [CustomerId(0), CustomerId(1)].into_iter().collect();
        let spec = AttackSpec::online(compromised, 8..18, target);
        let plan = plan_attack(&scenario, &spec, &learner, &SolverOptions::default()).unwrap();
        assert!(plan.converged);
        assert!(plan.residual <= 1e-6, "residual {}", plan.residual);
        assert!(!plan.delivery_infeasible);
        // Fakes match the benign responses along the loop.
        let trace = simulate_attack(&plan, &scenario, &learner, 5).unwrap();
        for event in &trace.events {
            assert_relative_eq!(
                event.total_attacked,
                event.total_benign,
                max_relative = 1e-6
            );
        }
    }

    #[test]
    fn empty_compromised_set_cannot_converge() {
        let scenario = noise_free_scenario(4, 6, 2);
        let learner = warm_learner(&scenario);
        let mut target = learner.aggregate_estimate();
        target.beta1 *= 0.8;
        let spec = AttackSpec::online(BTreeSet::new(), 6..16, target);
        let plan = plan_attack(&scenario, &spec, &learner, &SolverOptions::default()).unwrap();
        assert!(!plan.converged);
        assert!(plan.residual > 0.0);
        assert!(plan.fake_curtailments.is_empty());
    }

    #[test]
    fn impossible_delivery_band_is_flagged() {
        let scenario = noise_free_scenario(4, 6, 2);
        let learner = warm_learner(&scenario);
        let target = learner.aggregate_estimate();
        let compromised: BTreeSet<CustomerId> = [CustomerId(0)].into_iter().collect();
        let mut spec = AttackSpec::online(compromised, 6..12, target);
        // Tolerances so tight around an unreachable reference that no report
        // can satisfy them: demand double the commitment with zero slack.
        spec.delta_kw = Some(vec![-0.0; 6]);
        let mut scenario2 = scenario.clone();
        scenario2.aggregator.commitment_d *= 10.0;
        let plan = plan_attack(&scenario2, &spec, &learner, &SolverOptions::default()).unwrap();
        assert!(plan.delivery_infeasible);
        assert!(!plan.converged);
    }

    #[test]
    fn small_online_attack_reaches_reduced_slope_target() {
        let scenario = noise_free_scenario(10, 12, 21);
        let learner = warm_learner(&scenario);
        let current = learner.aggregate_estimate();
        let target = BetaParams::new(0.95 * current.beta1, current.beta0);
        let compromised: BTreeSet<CustomerId> =
            [CustomerId(0), CustomerId(3), CustomerId(7)].into_iter().collect();
        let spec = AttackSpec::online(compromised, 12..42, target);
        // Score the whole trajectory so the incentive inflation builds up
        // steadily instead of only at the horizon end.
        let options = SolverOptions {
            path_average: true,
            ..SolverOptions::default()
        };
        let plan = plan_attack(&scenario, &spec, &learner, &options).unwrap();
        assert!(!plan.delivery_infeasible);
        assert!(
            plan.converged,
            "residual {} after {} iterations",
            plan.residual, plan.iterations
        );
        // Accepted objective values never increase.
        for w in plan.objective_trajectory.windows(2) {
            assert!(w[1] <= w[0]);
        }
        // Reports respect the capacity boxes.
        for (&(_, id), &x) in &plan.fake_curtailments {
            let cap = scenario.customer(id).unwrap().x_max;
            assert!((0.0..=cap).contains(&x));
        }

        let trace = simulate_attack(&plan, &scenario, &learner, 77).unwrap();
        assert_eq!(trace.events.len(), spec.horizon.len());
        // Slope-reduction drives the incentive up, the aggregate estimate
        // down, and the payout delta positive.
        let last = trace.events.last().unwrap();
        assert!(
            last.aggregate_estimate_attacked.beta1 < last.aggregate_estimate_benign.beta1
        );
        assert!(trace.monetary_delta > 0.0);
        // Delivery stays inside the band at every event.
        for event in &trace.events {
            assert!(
                (event.commitment - event.total_attacked).abs() <= event.delta_kw + 1e-6,
                "event {} delivered {} against {} +/- {}",
                event.event_index,
                event.total_attacked,
                event.commitment,
                event.delta_kw
            );
        }
    }

    #[test]
    fn null_plan_reproduces_benign_trace() {
        let scenario = noise_free_scenario(5, 6, 4);
        let learner = warm_learner(&scenario);
        let target = learner.aggregate_estimate();
        let compromised: BTreeSet<CustomerId> = [CustomerId(2)].into_iter().collect();
        let spec = AttackSpec::online(compromised, 6..14, target);
        let plan = plan_attack(&scenario, &spec, &learner, &SolverOptions::default()).unwrap();
        let trace = simulate_attack(&plan, &scenario, &learner, 123).unwrap();
        for event in &trace.events {
            assert_relative_eq!(event.lambda_attacked, event.lambda_benign, max_relative = 1e-9);
            assert_relative_eq!(event.total_attacked, event.total_benign, max_relative = 1e-9);
        }
        assert!(trace.monetary_delta.abs() < 1e-6);
        let report = monetary_impact(&trace);
        assert!(report.delta_total.abs() < 1e-6);
    }

    #[test]
    fn monetary_impact_doubled_incentive_equals_base_payout() {
        // Trace built by hand: doubling the incentive with identical
        // curtailments adds exactly the benign payout.
        let events: Vec<AttackEventRecord> = (0..4)
            .map(|i| AttackEventRecord {
                event_index: i,
                lambda_benign: 1.0 + i as f64 * 0.1,
                lambda_attacked: 2.0 * (1.0 + i as f64 * 0.1),
                total_benign: 100.0,
                total_attacked: 100.0,
                commitment: 100.0,
                delta_kw: 5.0,
                aggregate_estimate_benign: BetaParams::new(0.0, 0.0),
                aggregate_estimate_attacked: BetaParams::new(0.0, 0.0),
            })
            .collect();
        let trace = AttackTrace {
            monetary_delta: 0.0,
            events,
        };
        let report = monetary_impact(&trace);
        assert_relative_eq!(report.delta_total, report.payout_benign, max_relative = 1e-12);
        assert_eq!(report.per_event_delta.len(), 4);
    }

    #[test]
    fn offline_rewrite_reaches_target_and_respects_bands() {
        let scenario = noise_free_scenario(6, 15, 31);
        let learner = warm_learner(&scenario);
        let current = learner.aggregate_estimate();
        let target = BetaParams::new(0.97 * current.beta1, current.beta0);
        let compromised: BTreeSet<CustomerId> =
            [CustomerId(1), CustomerId(4)].into_iter().collect();
        let spec = AttackSpec::offline(compromised, scenario.history.len(), target);
        let plan = plan_attack(&scenario, &spec, &learner, &SolverOptions::default()).unwrap();
        assert!(plan.converged, "offline residual {}", plan.residual);
        let trace = simulate_attack(&plan, &scenario, &learner, 0).unwrap();
        for event in &trace.events {
            assert!(
                (event.commitment - event.total_attacked).abs() <= event.delta_kw + 1e-6
            );
            assert_eq!(event.lambda_attacked, event.lambda_benign);
        }
        let terminal = trace.events.last().unwrap();
        assert_relative_eq!(
            terminal.aggregate_estimate_attacked.beta1,
            target.beta1,
            max_relative = 0.01
        );
    }

    #[test]
    fn online_and_offline_agree_at_the_fixed_point() {
        // Warm learner, mild target, matching horizon lengths: the two
        // schemes should land on the same terminal aggregate.
        let scenario = noise_free_scenario(5, 30, 13);
        let learner = warm_learner(&scenario);
        let current = learner.aggregate_estimate();
        let target = BetaParams::new(0.97 * current.beta1, current.beta0);
        let compromised: BTreeSet<CustomerId> =
            [CustomerId(0), CustomerId(2)].into_iter().collect();

        let offline_spec =
            AttackSpec::offline(compromised.clone(), scenario.history.len(), target);
        let offline_plan =
            plan_attack(&scenario, &offline_spec, &learner, &SolverOptions::default()).unwrap();
        let offline_trace = simulate_attack(&offline_plan, &scenario, &learner, 0).unwrap();
        let offline_terminal = offline_trace
            .events
            .last()
            .unwrap()
            .aggregate_estimate_attacked;

        let online_spec = AttackSpec::online(compromised, 30..60, target);
        let online_plan =
            plan_attack(&scenario, &online_spec, &learner, &SolverOptions::default()).unwrap();
        let online_trace = simulate_attack(&online_plan, &scenario, &learner, 0).unwrap();
        let online_terminal = online_trace
            .events
            .last()
            .unwrap()
            .aggregate_estimate_attacked;

        let norm = (offline_terminal.beta1.powi(2) + offline_terminal.beta0.powi(2)).sqrt();
        let gap = ((online_terminal.beta1 - offline_terminal.beta1).powi(2)
            + (online_terminal.beta0 - offline_terminal.beta0).powi(2))
        .sqrt();
        assert!(
            gap <= 0.05 * norm,
            "terminal aggregates diverge: online {online_terminal:?} vs offline {offline_terminal:?}"
        );
    }

    #[test]
    fn spec_validation_catches_bad_horizons() {
        let scenario = noise_free_scenario(3, 5, 1);
        let learner = warm_learner(&scenario);
        let target = learner.aggregate_estimate();
        // Online horizon must start right after the history.
        let spec = AttackSpec::online(BTreeSet::new(), 7..10, target);
        assert!(plan_attack(&scenario, &spec, &learner, &SolverOptions::default()).is_err());
        // Offline horizon must match the history.
        let spec = AttackSpec {
            mode: AttackMode::Offline,
            ..AttackSpec::online(BTreeSet::new(), 0..3, target)
        };
        assert!(plan_attack(&scenario, &spec, &learner, &SolverOptions::default()).is_err());
        // Unknown compromised id.
        let spec = AttackSpec::online(
            [CustomerId(99)].into_iter().collect(),
            5..10,
            target,
        );
        assert!(matches!(
            plan_attack(&scenario, &spec, &learner, &SolverOptions::default()),
            Err(Error::Referential(_))
        ));
    }
}
