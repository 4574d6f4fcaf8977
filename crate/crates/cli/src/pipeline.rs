//! Subcommand implementations. Each stage reads the resolved config plus
//! seed, writes its artifacts under the output directory, and contributes
//! to the run summary.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use adrsim_core::attack::{
    estimate_aggregate_behavior, monetary_impact, plan_attack, simulate_attack, AttackPlan,
    AttackSpec, AttackTrace,
};
use adrsim_core::gridfreq::{attack_demand_profile, relay_check, simulate_frequency, RelayKind};
use adrsim_core::incentive::{design_incentive, AggregatorParams, IncentiveResult};
use adrsim_core::learner::{batch_ols, empirical_loss, CustomerHistory, LearnerState};
use adrsim_core::model::{round_sig9, BetaParams, CustomerId};
use adrsim_core::scenario::{load_history, synth_scenario, Scenario};
use adrsim_core::valuation::{
    rank_customers, shapley_events_mc, top_k_loss_curve, EventValueReport,
};

use crate::config::{AppConfig, AttackModeConfig};
use crate::output::{write_json, Cell, OutputFormat, Table};
use crate::RunError;

/// Stream ids for seed derivation; the scenario itself draws on stream 0.
const STREAM_CUSTOMER_PICK: u64 = 3;
const SEED_SIMULATE_OFFSET: u64 = 0x516d;

pub struct StageContext<'a> {
    pub config: &'a AppConfig,
    pub seed: u64,
    pub out_dir: &'a Path,
    pub format: OutputFormat,
    pub artifacts: Vec<PathBuf>,
}

impl<'a> StageContext<'a> {
    pub fn new(
        config: &'a AppConfig,
        seed: u64,
        out_dir: &'a Path,
        format: OutputFormat,
    ) -> Self {
        Self {
            config,
            seed,
            out_dir,
            format,
            artifacts: Vec::new(),
        }
    }

    fn emit_table(&mut self, table: &Table) -> Result<(), RunError> {
        let path = table.write(self.out_dir, self.format)?;
        self.artifacts.push(path);
        Ok(())
    }

    fn emit_json<T: serde::Serialize>(&mut self, name: &str, value: &T) -> Result<(), RunError> {
        let path = self.out_dir.join(format!("{name}.json"));
        let doc = serde_json::to_value(value)
            .map_err(|e| RunError::Runtime(format!("serialization failed: {e}")))?;
        write_json(&path, &crate::output::round_json(doc))?;
        self.artifacts.push(path);
        Ok(())
    }

    fn emit_raw(&mut self, path: PathBuf) {
        self.artifacts.push(path);
    }
}

pub fn synth_stage(ctx: &mut StageContext) -> Result<Scenario, RunError> {
    let scenario = synth_scenario(&ctx.config.scenario_config(), ctx.seed)?;
    let history_path = ctx.out_dir.join("history.csv");
    scenario.save_history(&history_path)?;
    ctx.emit_raw(history_path);
    let scenario_path = ctx.out_dir.join("scenario.json");
    let doc = serde_json::to_value(&scenario)
        .map_err(|e| RunError::Runtime(format!("serialization failed: {e}")))?;
    write_json(&scenario_path, &doc)?;
    ctx.emit_raw(scenario_path);
    Ok(scenario)
}

/// Per-customer series from an explicit history file or a synthesized
/// scenario.
pub fn resolve_histories(
    ctx: &mut StageContext,
    history_path: Option<&Path>,
) -> Result<(BTreeMap<CustomerId, CustomerHistory>, Vec<(f64, f64)>), RunError> {
    match history_path {
        Some(path) => {
            let records = load_history(path, None)?;
            let mut histories: BTreeMap<CustomerId, CustomerHistory> = BTreeMap::new();
            let mut aggregate = Vec::with_capacity(records.len());
            for record in &records {
                for (&id, &x) in &record.curtailments {
                    histories.entry(id).or_default().push(record.lambda, x);
                }
                aggregate.push((record.lambda, record.total_curtailment()));
            }
            Ok((histories, aggregate))
        }
        None => {
            let scenario = synth_stage(ctx)?;
            Ok((scenario.customer_histories(), scenario.aggregate_history()))
        }
    }
}

/// Batch least-squares and online-gradient estimates side by side.
pub fn learn_stage(
    ctx: &mut StageContext,
    history_path: Option<&Path>,
) -> Result<serde_json::Value, RunError> {
    let (histories, aggregate) = resolve_histories(ctx, history_path)?;
    let eta = ctx.config.learner.eta;

    let mut table = Table::new(
        "estimates",
        &[
            "customer_id",
            "ols_beta1",
            "ols_beta0",
            "ols_loss",
            "ogd_beta1",
            "ogd_beta0",
            "ogd_loss",
        ],
    );
    for (id, history) in &histories {
        let ols = batch_ols(history)?;
        let mut ogd = BetaParams::new(0.0, 0.0);
        for &(lambda, x) in &history.pairs {
            ogd = adrsim_core::learner::ogd_step(&ogd, lambda, x, eta)?;
        }
        table.push(vec![
            Cell::UInt(id.0 as u64),
            Cell::Num(ols.beta1),
            Cell::Num(ols.beta0),
            Cell::Num(empirical_loss(history, &ols)?),
            Cell::Num(ogd.beta1),
            Cell::Num(ogd.beta0),
            Cell::Num(empirical_loss(history, &ogd)?),
        ]);
    }
    ctx.emit_table(&table)?;

    let aggregate_fit = estimate_aggregate_behavior(&aggregate)?;
    Ok(serde_json::json!({
        "customers": histories.len(),
        "events": aggregate.len(),
        "aggregate_beta1": round_sig9(aggregate_fit.beta1),
        "aggregate_beta0": round_sig9(aggregate_fit.beta0),
    }))
}

pub fn incentive_stage(
    ctx: &mut StageContext,
    history_path: Option<&Path>,
) -> Result<serde_json::Value, RunError> {
    let spec = &ctx.config.incentive;
    let (betas, params) = if let Some(pairs) = &spec.betas {
        if pairs.is_empty() {
            return Err(RunError::Validation(
                "incentive.betas must not be empty when given".into(),
            ));
        }
        let betas: BTreeMap<CustomerId, BetaParams> = pairs
            .iter()
            .enumerate()
            .map(|(i, &(b1, b0))| (CustomerId(i as u32), BetaParams::new(b1, b0)))
            .collect();
        let params = AggregatorParams::new(
            spec.kappa.unwrap_or(ctx.config.aggregator.kappa),
            spec.gamma.unwrap_or(ctx.config.aggregator.gamma),
            spec.commitment_kw
                .or(ctx.config.aggregator.commitment_kw)
                .ok_or_else(|| {
                    RunError::Validation(
                        "incentive on explicit betas needs a commitment_kw".into(),
                    )
                })?,
            betas.len(),
        )?;
        (betas, params)
    } else if let Some(path) = history_path {
        let (histories, aggregate) = resolve_histories(ctx, Some(path))?;
        let mut betas = BTreeMap::new();
        for (&id, history) in &histories {
            betas.insert(id, batch_ols(history)?);
        }
        let fit = estimate_aggregate_behavior(&aggregate)?;
        let mean_lambda =
            aggregate.iter().map(|p| p.0).sum::<f64>() / aggregate.len() as f64;
        let commitment = spec
            .commitment_kw
            .or(ctx.config.aggregator.commitment_kw)
            .unwrap_or(fit.beta1 * mean_lambda + fit.beta0);
        let params = AggregatorParams::new(
            spec.kappa.unwrap_or(ctx.config.aggregator.kappa),
            spec.gamma.unwrap_or(ctx.config.aggregator.gamma),
            commitment,
            betas.len(),
        )?;
        (betas, params)
    } else {
        let scenario = synth_stage(ctx)?;
        let mut betas = BTreeMap::new();
        for (&id, history) in &scenario.customer_histories() {
            betas.insert(id, batch_ols(history)?);
        }
        (betas, scenario.aggregator)
    };

    let result = design_incentive(&betas, &params)?;
    emit_incentive(ctx, &betas, &params, &result)
}

fn emit_incentive(
    ctx: &mut StageContext,
    betas: &BTreeMap<CustomerId, BetaParams>,
    params: &AggregatorParams,
    result: &IncentiveResult,
) -> Result<serde_json::Value, RunError> {
    let mut table = Table::new(
        "expected_responses",
        &["customer_id", "beta1", "beta0", "expected_kw"],
    );
    for (id, beta) in betas {
        table.push(vec![
            Cell::UInt(id.0 as u64),
            Cell::Num(beta.beta1),
            Cell::Num(beta.beta0),
            Cell::Num(result.expected_per_customer[id]),
        ]);
    }
    ctx.emit_table(&table)?;

    let summary = serde_json::json!({
        "lambda_hat": round_sig9(result.lambda_hat),
        "lambda_broadcast": round_sig9(result.lambda_broadcast),
        "expected_total_kw": round_sig9(result.expected_total),
        "unstable_estimates": result.unstable_estimates,
        "kappa": round_sig9(params.kappa),
        "gamma": round_sig9(params.gamma),
        "commitment_kw": round_sig9(params.commitment_d),
        "n_customers": params.n_customers,
    });
    ctx.emit_json("incentive", &summary)?;
    Ok(summary)
}

/// Picks the attacked customer set: the top fraction of the value ranking.
pub fn select_compromised(
    scenario: &Scenario,
    fits: &BTreeMap<CustomerId, BetaParams>,
    frac: f64,
) -> Result<BTreeSet<CustomerId>, RunError> {
    if !(0.0..=1.0).contains(&frac) {
        return Err(RunError::Validation(format!(
            "compromised fraction must lie in [0, 1], got {frac}"
        )));
    }
    let aggregate = scenario.aggregate_history();
    let aggregate_fit = estimate_aggregate_behavior(&aggregate)?;
    let ranking = rank_customers(fits, &aggregate, &aggregate_fit)?;
    let mut ranked: Vec<(CustomerId, f64)> =
        ranking.values.iter().map(|(&id, &v)| (id, v)).collect();
    ranked.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });
    let count = ((frac * scenario.customers.len() as f64).ceil() as usize)
        .min(scenario.customers.len());
    Ok(ranked.into_iter().take(count).map(|(id, _)| id).collect())
}

pub struct AttackOutcome {
    pub plan: AttackPlan,
    pub trace: AttackTrace,
    pub summary: serde_json::Value,
}

pub fn attack_stage(ctx: &mut StageContext) -> Result<AttackOutcome, RunError> {
    let cfg = &ctx.config.attack;
    let scenario = synth_stage(ctx)?;
    let histories = scenario.customer_histories();
    let learner = LearnerState::from_batch_fits(&histories, ctx.config.learner.eta)?;
    let fits = learner.estimates.clone();

    let compromised = select_compromised(&scenario, &fits, cfg.compromised_frac)?;

    // The attacker anchors its target on the publicly estimable aggregate.
    let aggregate_fit = estimate_aggregate_behavior(&scenario.aggregate_history())?;
    let target = BetaParams::new(
        cfg.target_beta1_factor * aggregate_fit.beta1,
        aggregate_fit.beta0,
    );

    let spec = match cfg.mode {
        AttackModeConfig::Online => {
            let start = scenario.history.len();
            AttackSpec::online(compromised, start..start + cfg.horizon, target)
                .with_delta_frac(cfg.delta_frac)
        }
        AttackModeConfig::Offline => {
            AttackSpec::offline(compromised, scenario.history.len(), target)
                .with_delta_frac(cfg.delta_frac)
        }
    };

    let options = ctx.config.solver_options();
    let plan = plan_attack(&scenario, &spec, &learner, &options)?;
    let trace = simulate_attack(
        &plan,
        &scenario,
        &learner,
        ctx.seed.wrapping_add(SEED_SIMULATE_OFFSET),
    )?;
    let money = monetary_impact(&trace);

    let mut trace_table = Table::new(
        "attack_trace",
        &[
            "event_index",
            "lambda_benign",
            "lambda_attacked",
            "total_benign_kw",
            "total_attacked_kw",
            "commitment_kw",
            "delta_kw",
            "est_beta1_benign",
            "est_beta1_attacked",
            "est_beta0_benign",
            "est_beta0_attacked",
            "payout_delta_usd",
        ],
    );
    for (event, delta) in trace.events.iter().zip(&money.per_event_delta) {
        trace_table.push(vec![
            Cell::UInt(event.event_index as u64),
            Cell::Num(event.lambda_benign),
            Cell::Num(event.lambda_attacked),
            Cell::Num(event.total_benign),
            Cell::Num(event.total_attacked),
            Cell::Num(event.commitment),
            Cell::Num(event.delta_kw),
            Cell::Num(event.aggregate_estimate_benign.beta1),
            Cell::Num(event.aggregate_estimate_attacked.beta1),
            Cell::Num(event.aggregate_estimate_benign.beta0),
            Cell::Num(event.aggregate_estimate_attacked.beta0),
            Cell::Num(*delta),
        ]);
    }
    ctx.emit_table(&trace_table)?;

    let mut fakes = Table::new(
        "fake_curtailments",
        &["event_index", "customer_id", "reported_kw"],
    );
    for (&(event, id), &x) in &plan.fake_curtailments {
        fakes.push(vec![
            Cell::UInt(event as u64),
            Cell::UInt(id.0 as u64),
            Cell::Num(x),
        ]);
    }
    ctx.emit_table(&fakes)?;

    let target_norm = (target.beta1.powi(2) + target.beta0.powi(2)).sqrt();
    let plan_doc = serde_json::json!({
        "mode": cfg.mode,
        "compromised": plan.spec.compromised_ids.iter().map(|id| id.0).collect::<Vec<_>>(),
        "horizon_start": plan.spec.horizon.first(),
        "horizon_len": plan.spec.horizon.len(),
        "target_beta1": round_sig9(target.beta1),
        "target_beta0": round_sig9(target.beta0),
        "target_norm": round_sig9(target_norm),
        "converged": plan.converged,
        "residual": round_sig9(plan.residual),
        "residual_frac_of_target": round_sig9(plan.residual / target_norm),
        "delivery_infeasible": plan.delivery_infeasible,
        "iterations": plan.iterations,
        "objective_start": plan.objective_trajectory.first().map(|v| round_sig9(*v)),
        "objective_end": plan.objective_trajectory.last().map(|v| round_sig9(*v)),
    });
    ctx.emit_json("attack_plan", &plan_doc)?;

    let money_doc = serde_json::json!({
        "payout_benign_usd": round_sig9(money.payout_benign),
        "payout_attacked_usd": round_sig9(money.payout_attacked),
        "delta_usd": round_sig9(money.delta_total),
    });
    ctx.emit_json("monetary", &money_doc)?;

    let summary = serde_json::json!({
        "plan": plan_doc,
        "monetary": money_doc,
    });
    Ok(AttackOutcome {
        plan,
        trace,
        summary,
    })
}

/// Values one customer's events, writes per-event values, the Monte-Carlo
/// convergence trace, and the top-fraction refit loss curve.
pub fn value_events_stage(
    ctx: &mut StageContext,
    history_path: Option<&Path>,
) -> Result<serde_json::Value, RunError> {
    let (histories, _) = resolve_histories(ctx, history_path)?;
    let customer = pick_customer(ctx, &histories)?;
    let history = &histories[&customer];
    let t = history.len();
    let m = ctx.config.valuation.m_permutations.unwrap_or(1000 * t);

    let report = shapley_events_mc(history, m, ctx.seed)?;
    emit_event_values(ctx, customer, history, &report)?;

    let curve = top_k_loss_curve(history, &report, &ctx.config.valuation.fractions)?;
    let mut curve_table = Table::new("loss_curve", &["fraction", "relative_loss"]);
    for &(fraction, loss) in &curve {
        curve_table.push(vec![Cell::Num(fraction), Cell::Num(loss)]);
    }
    ctx.emit_table(&curve_table)?;

    Ok(serde_json::json!({
        "customer": customer.0,
        "events": t,
        "permutations": report.permutations_used,
        "loss_curve": curve
            .iter()
            .map(|&(f, l)| serde_json::json!({"fraction": f, "relative_loss": round_sig9(l)}))
            .collect::<Vec<_>>(),
    }))
}

fn pick_customer(
    ctx: &StageContext,
    histories: &BTreeMap<CustomerId, CustomerHistory>,
) -> Result<CustomerId, RunError> {
    if let Some(raw) = ctx.config.valuation.customer {
        let id = CustomerId(raw);
        if !histories.contains_key(&id) {
            return Err(RunError::Validation(format!(
                "customer {raw} has no recorded events"
            )));
        }
        return Ok(id);
    }
    let ids: Vec<CustomerId> = histories.keys().copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    rng.set_stream(STREAM_CUSTOMER_PICK);
    Ok(ids[rng.gen_range(0..ids.len())])
}

fn emit_event_values(
    ctx: &mut StageContext,
    customer: CustomerId,
    history: &CustomerHistory,
    report: &EventValueReport,
) -> Result<(), RunError> {
    let mut values = Table::new(
        "event_values",
        &["event_position", "lambda", "curtailment_kw", "value", "capped"],
    );
    for (pos, &value) in report.values.iter().enumerate() {
        let (lambda, x) = history.pairs[pos];
        values.push(vec![
            Cell::UInt(pos as u64),
            Cell::Num(lambda),
            Cell::Num(x),
            Cell::Num(value),
            Cell::Bool(report.capped_events.contains(&pos)),
        ]);
    }
    values.name = format!("event_values_customer_{}", customer.0);
    ctx.emit_table(&values)?;

    let mut convergence = Table::new("value_convergence", &["permutations", "event_position", "value"]);
    for point in &report.convergence_trace {
        for (pos, &value) in point.values.iter().enumerate() {
            convergence.push(vec![
                Cell::UInt(point.permutations as u64),
                Cell::UInt(pos as u64),
                Cell::Num(value),
            ]);
        }
    }
    convergence.name = format!("value_convergence_customer_{}", customer.0);
    ctx.emit_table(&convergence)?;
    Ok(())
}

pub fn value_customers_stage(
    ctx: &mut StageContext,
    history_path: Option<&Path>,
) -> Result<serde_json::Value, RunError> {
    let (histories, aggregate) = resolve_histories(ctx, history_path)?;
    let mut fits = BTreeMap::new();
    for (&id, history) in &histories {
        fits.insert(id, batch_ols(history)?);
    }
    let aggregate_fit = estimate_aggregate_behavior(&aggregate)?;
    let ranking = rank_customers(&fits, &aggregate, &aggregate_fit)?;

    let mut table = Table::new(
        "customer_values",
        &["customer_id", "beta1", "beta0", "value", "capped"],
    );
    for (&id, &value) in &ranking.values {
        let beta = fits[&id];
        table.push(vec![
            Cell::UInt(id.0 as u64),
            Cell::Num(beta.beta1),
            Cell::Num(beta.beta0),
            Cell::Num(value),
            Cell::Bool(ranking.capped.contains(&id)),
        ]);
    }
    ctx.emit_table(&table)?;

    let n = fits.len() as f64;
    Ok(serde_json::json!({
        "customers": fits.len(),
        "aggregate_beta1": round_sig9(aggregate_fit.beta1),
        "aggregate_beta0": round_sig9(aggregate_fit.beta0),
        "aggregate_beta1_per_customer": round_sig9(aggregate_fit.beta1 / n),
        "aggregate_beta0_per_customer": round_sig9(aggregate_fit.beta0 / n),
    }))
}

pub fn gridsim_stage(ctx: &mut StageContext) -> Result<serde_json::Value, RunError> {
    let grid = &ctx.config.grid;
    let factor = grid.lambda_factor;
    let scenario = synth_stage(ctx)?;
    let baseline = &grid.baseline_profile_mw;
    let window = grid.dr_window.0..grid.dr_window.1;
    let lambda = grid.lambda_benign_usd_per_kwh;

    let benign =
        attack_demand_profile(baseline, &scenario.customers, lambda, 1.0, window.clone())?;
    let attacked =
        attack_demand_profile(baseline, &scenario.customers, lambda, factor, window.clone())?;

    let mut profile = Table::new(
        "demand_profile",
        &["hour", "baseline_mw", "benign_dr_mw", "attacked_dr_mw"],
    );
    for hour in 0..baseline.len() {
        profile.push(vec![
            Cell::UInt(hour as u64),
            Cell::Num(baseline[hour]),
            Cell::Num(benign[hour]),
            Cell::Num(attacked[hour]),
        ]);
    }
    ctx.emit_table(&profile)?;

    // The DR window edges are the two largest demand changes: curtailment
    // engages at the start and releases at the end. Each instant is
    // simulated from equilibrium to expose the worst excursion.
    let params = ctx.config.grid_params();
    let thresholds = ctx.config.relay_thresholds();
    let start = window.start;
    let end = window.end - 1;
    let mut trips_doc = Vec::new();
    for (label, delta_mw) in [
        ("dr_start_benign", benign[start] - baseline[start]),
        ("dr_start_attacked", attacked[start] - baseline[start]),
        ("dr_end_benign", baseline[end] - benign[end]),
        ("dr_end_attacked", baseline[end] - attacked[end]),
    ] {
        let trace = simulate_frequency(&params, &[(1.0, delta_mw)], grid.sim_time_s)?;
        let trips = relay_check(&trace, &thresholds);
        let path = ctx.out_dir.join(format!("frequency_{label}.csv"));
        trace.save_csv(&path)?;
        ctx.emit_raw(path);
        trips_doc.push(serde_json::json!({
            "case": label,
            "step_mw": round_sig9(delta_mw),
            "f_min": round_sig9(trace.f_min),
            "f_max": round_sig9(trace.f_max),
            "trips": trips.iter().map(|t| serde_json::json!({
                "time_s": round_sig9(t.time_s),
                "kind": match t.kind {
                    RelayKind::UnderFrequency => "under",
                    RelayKind::OverFrequency => "over",
                },
                "freq_pu": round_sig9(t.freq_pu),
            })).collect::<Vec<_>>(),
        }));
    }
    ctx.emit_json("relay_trips", &trips_doc)?;

    Ok(serde_json::json!({
        "lambda_factor": factor,
        "cases": trips_doc,
    }))
}

/// Full chain: synthesize, learn, value events and customers, run the
/// monetary attack, and push the tampered incentive through the frequency
/// surrogate.
pub fn replicate_stage(ctx: &mut StageContext) -> Result<serde_json::Value, RunError> {
    let learn_summary = learn_stage(ctx, None)?;
    let value_events_summary = value_events_stage(ctx, None)?;
    let value_customers_summary = value_customers_stage(ctx, None)?;
    let attack = attack_stage(ctx)?;
    let grid_summary = gridsim_stage(ctx)?;

    // Deduplicate artifacts produced by the repeated synth calls.
    let mut seen = BTreeSet::new();
    ctx.artifacts.retain(|p| seen.insert(p.clone()));

    Ok(serde_json::json!({
        "learn": learn_summary,
        "value_events": value_events_summary,
        "value_customers": value_customers_summary,
        "attack": attack.summary,
        "grid": grid_summary,
    }))
}
