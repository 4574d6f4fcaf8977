//! Run configuration: a single JSON document with one section per
//! subsystem. Every field has a default; the echo embedded in each run
//! report is the fully resolved document, so a report plus a seed
//! reproduces its run exactly.

use serde::{Deserialize, Serialize};

use adrsim_core::scenario::ScenarioConfig;

#[derive(Debug, Clone, Serialize, Deserialize, Default, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AppConfig {
    pub customers: CustomersConfig,
    pub events: EventsConfig,
    pub aggregator: AggregatorConfig,
    pub learner: LearnerConfig,
    pub attack: AttackConfig,
    pub valuation: ValuationConfig,
    pub incentive: IncentiveConfig,
    pub grid: GridConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct CustomersConfig {
    pub count: usize,
    pub beta1_range: (f64, f64),
    pub response_range_kw: (f64, f64),
    pub x_max_kw: f64,
    pub noise_sigma_kw: f64,
}

impl Default for CustomersConfig {
    fn default() -> Self {
        Self {
            count: 50,
            beta1_range: (2.0, 20.0),
            response_range_kw: (5.0, 50.0),
            x_max_kw: 50.0,
            noise_sigma_kw: 0.5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EventsConfig {
    pub count: usize,
    pub lambda_range: (f64, f64),
}

impl Default for EventsConfig {
    fn default() -> Self {
        Self {
            count: 20,
            lambda_range: (1.0, 2.0),
        }
    }
}

/// Aggregator economics. The revenue rate defaults low: the delivery
/// penalty then dominates and the benign loop delivers close to the
/// commitment, which is what keeps a stealthy attack feasible at the 5%
/// delivery band.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AggregatorConfig {
    pub kappa: f64,
    pub gamma: f64,
    /// Committed curtailment, kW; resolved from the synthesized aggregate
    /// when absent.
    pub commitment_kw: Option<f64>,
    pub commitment_jitter: f64,
}

impl Default for AggregatorConfig {
    fn default() -> Self {
        Self {
            kappa: 1.0,
            gamma: 0.05,
            commitment_kw: None,
            commitment_jitter: 0.15,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LearnerConfig {
    pub eta: f64,
    pub feature_scaling: bool,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            eta: 0.05,
            feature_scaling: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub mode: AttackModeConfig,
    /// Events in the attack window.
    pub horizon: usize,
    /// Fraction of customers compromised, picked from the top of the
    /// customer-value ranking.
    pub compromised_frac: f64,
    /// Slope multiplier defining the target aggregate behavior.
    pub target_beta1_factor: f64,
    /// Delivery tolerance as a fraction of each event's commitment.
    pub delta_frac: f64,
    pub max_iters: usize,
    pub penalty_mu: f64,
    pub tol_obj_change: f64,
    pub fd_step_frac: f64,
    pub path_average: bool,
    pub delivery_margin_frac: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum AttackModeConfig {
    Online,
    Offline,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            mode: AttackModeConfig::Online,
            horizon: 65,
            compromised_frac: 0.3,
            target_beta1_factor: 0.95,
            delta_frac: 0.05,
            max_iters: 5000,
            penalty_mu: 10.0,
            tol_obj_change: 1e-8,
            fd_step_frac: 1e-4,
            path_average: true,
            delivery_margin_frac: 0.2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ValuationConfig {
    /// Monte-Carlo permutations; defaults to 1000 per recorded event.
    pub m_permutations: Option<usize>,
    /// Availability fractions for the refit loss curve.
    pub fractions: Vec<f64>,
    /// Customer whose events are valued; seed-picked when absent.
    pub customer: Option<u32>,
}

impl Default for ValuationConfig {
    fn default() -> Self {
        Self {
            m_permutations: None,
            fractions: vec![0.25, 0.5, 0.75, 1.0],
            customer: None,
        }
    }
}

/// Standalone incentive instances. When `betas` is present the incentive
/// subcommand runs on them directly instead of a synthesized scenario.
#[derive(Debug, Clone, Serialize, Deserialize, Default, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct IncentiveConfig {
    /// Explicit (beta1, beta0) pairs.
    pub betas: Option<Vec<(f64, f64)>>,
    pub kappa: Option<f64>,
    pub gamma: Option<f64>,
    pub commitment_kw: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub base_mva: f64,
    pub inertia_h_s: f64,
    pub damping_pu: f64,
    pub droop_r_pu: f64,
    pub governor_tc_s: f64,
    pub sim_time_s: f64,
    pub relay_under_pu: f64,
    pub relay_over_pu: f64,
    /// DR window as [start_hour, end_hour).
    pub dr_window: (usize, usize),
    /// Benign incentive the tampering scales.
    pub lambda_benign_usd_per_kwh: f64,
    pub lambda_factor: f64,
    /// Hourly microgrid demand, MW.
    pub baseline_profile_mw: Vec<f64>,
}

pub const DEFAULT_BASELINE_PROFILE_MW: [f64; 24] = [
    8.2, 7.9, 7.6, 7.4, 7.3, 7.5, 8.1, 9.0, 10.1, 11.0, 11.8, 12.3, 12.6, 12.7, 12.5, 12.2,
    11.8, 11.3, 10.8, 10.2, 9.6, 9.1, 8.7, 8.4,
];

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            base_mva: 13.4,
            inertia_h_s: 4.0,
            damping_pu: 1.0,
            droop_r_pu: 0.05,
            governor_tc_s: 0.5,
            sim_time_s: 40.0,
            relay_under_pu: 0.9916,
            relay_over_pu: 1.0083,
            dr_window: (11, 15),
            lambda_benign_usd_per_kwh: 1.5,
            lambda_factor: 50.0,
            baseline_profile_mw: DEFAULT_BASELINE_PROFILE_MW.to_vec(),
        }
    }
}

impl AppConfig {
    pub fn scenario_config(&self) -> ScenarioConfig {
        ScenarioConfig {
            n_customers: self.customers.count,
            n_events: self.events.count,
            lambda_range: self.events.lambda_range,
            response_range: self.customers.response_range_kw,
            beta1_range: self.customers.beta1_range,
            x_max: self.customers.x_max_kw,
            noise_sigma: self.customers.noise_sigma_kw,
            kappa: self.aggregator.kappa,
            gamma: self.aggregator.gamma,
            commitment_kw: self.aggregator.commitment_kw,
            commitment_jitter: self.aggregator.commitment_jitter,
            learner_eta: self.learner.eta,
        }
    }

    pub fn grid_params(&self) -> adrsim_core::gridfreq::GridParams {
        adrsim_core::gridfreq::GridParams {
            base_mva: self.grid.base_mva,
            inertia_h: self.grid.inertia_h_s,
            damping_d: self.grid.damping_pu,
            droop_r: self.grid.droop_r_pu,
            governor_tc: self.grid.governor_tc_s,
            nominal_freq: 1.0,
        }
    }

    pub fn relay_thresholds(&self) -> adrsim_core::gridfreq::RelayThresholds {
        adrsim_core::gridfreq::RelayThresholds {
            under: self.grid.relay_under_pu,
            over: self.grid.relay_over_pu,
        }
    }

    pub fn solver_options(&self) -> adrsim_core::attack::SolverOptions {
        adrsim_core::attack::SolverOptions {
            max_iters: self.attack.max_iters,
            tol_obj_change: self.attack.tol_obj_change,
            fd_step_frac: self.attack.fd_step_frac,
            penalty_mu: self.attack.penalty_mu,
            delivery_margin_frac: self.attack.delivery_margin_frac,
            path_average: self.attack.path_average,
            convergence_tol_frac: 0.01,
        }
    }
}
